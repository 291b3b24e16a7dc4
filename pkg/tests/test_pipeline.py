import pytest

from clecnn import pipeline
from clecnn.errors import ConfigError


def test_full_scale_gate():
    with pytest.raises(ConfigError, match="--full-scale"):
        pipeline.check_scale("net2", False)
    pipeline.check_scale("net2", True)
    pipeline.check_scale("net1-mini", False)


def test_diagnostics_summary():
    acc = {"a DT": [0.8] * 5 + [0.8, 0.79, 0.7], "a SFT": [0.9] * 8, "a DFT": [1.0] * 8}
    auc = {"a DT": [0.8] * 8, "a SFT": [0.85] * 8, "a DFT": [0.9] * 8}
    d = pipeline.diagnostics(acc, auc, ["a"], ["DT", "SFT", "DFT"])
    assert d["ensemble_vs_mean"]["a DT"]["arithmetic_within_0.02"] is True
    assert d["ensemble_vs_mean"]["a DT"]["geometric_within_0.02"] is False
    assert d["regime_order"]["a mean"]["DFT>=SFT>=DT"] is True


def test_experiment_rejects_unknown_regime(tmp_path):
    with pytest.raises(ConfigError):
        pipeline.run_experiment(pipeline.ExperimentConfig(regimes=("XT",)), tmp_path / "x")
