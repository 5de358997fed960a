"""Health checks: every module imports and the CLI entry point is wired."""

import sys
from pathlib import Path

import pytest

REPO_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(REPO_ROOT))


# ---------------------------------------------------------------------------
# Module imports
# ---------------------------------------------------------------------------

class TestImports:
    """Every finetrack module should import without error."""

    def test_import_package(self):
        import finetrack
        assert finetrack.__version__

    def test_import_core(self):
        from finetrack import core
        assert hasattr(core, "BoundingBox")
        assert hasattr(core, "giou")

    def test_import_features(self):
        from finetrack import features
        assert hasattr(features, "feature_channels")
        assert hasattr(features, "load_external_features")

    def test_import_dcf(self):
        from finetrack import dcf
        assert hasattr(dcf, "train_filter")
        assert hasattr(dcf, "select_scale")

    def test_import_localizer(self):
        from finetrack import localizer
        assert hasattr(localizer, "proi_pool")
        assert hasattr(localizer, "train_head")

    def test_import_pipeline(self):
        from finetrack import pipeline
        assert hasattr(pipeline, "init")
        assert hasattr(pipeline, "step")

    def test_import_bench(self):
        from finetrack import bench
        assert hasattr(bench, "load_sequence")
        assert hasattr(bench, "success_auc")

    def test_import_config(self):
        from finetrack import config
        assert hasattr(config, "RunConfig")

    def test_import_runner(self):
        from finetrack import runner
        for name in ("run_track", "run_eval", "run_train_scorer", "run_synth"):
            assert hasattr(runner, name)


class TestErrorHierarchy:
    """Every module error derives from the package base so the CLI can catch them all."""

    def test_all_errors_are_finetrack_errors(self):
        from finetrack.core import FinetrackError, InvalidBoxError
        from finetrack.features import (
            PatchError, BadMagicError, DimensionMismatchError, NonFiniteValueError, TruncatedPayloadError,
        )
        from finetrack.dcf import DcfError
        from finetrack.localizer import LocalizerError, HeadHashMismatchError
        from finetrack.pipeline import TrackerError, InitError
        from finetrack.bench import (
            SequenceError, MissingFileError, CountMismatchError, GroundTruthParseError,
            MeasurementError, SynthSpecError,
        )
        from finetrack.config import ConfigError

        for cls in (InvalidBoxError, PatchError, BadMagicError, DimensionMismatchError, TruncatedPayloadError,
                    NonFiniteValueError,
                    DcfError, LocalizerError, HeadHashMismatchError, TrackerError, InitError, SequenceError,
                    MissingFileError, CountMismatchError, GroundTruthParseError, MeasurementError,
                    SynthSpecError, ConfigError):
            assert issubclass(cls, FinetrackError), cls.__name__


class TestCli:

    def test_cli_group_has_commands(self):
        from ftrack import cli
        assert {"track", "eval", "train-scorer", "synth", "config"} <= set(cli.commands)

    def test_help(self):
        from click.testing import CliRunner
        from ftrack import cli
        result = CliRunner().invoke(cli, ["--help"])
        assert result.exit_code == 0
        assert "train-scorer" in result.output
