import pytest

from core.experiment import ARMS, run_transfer_experiment
from utils.types import ExperimentSettings, ModelConfig


def test_settings_validation():
    with pytest.raises(ValueError):
        ExperimentSettings(fraction=0.0)
    with pytest.raises(ValueError):
        ExperimentSettings(seeds=[])
    assert ExperimentSettings(**{"lambda": 0.5}).lambda_reg == 0.5


@pytest.mark.slow
def test_small_experiment_writes_tables(tmp_path):
    settings = ExperimentSettings(
        out_dir=tmp_path,
        config=ModelConfig(latent=8, hidden_layers=1, m_enc=1, m_gu=1, pooling_ratios=(2,)),
        pretrain_trajectories=3,
        finetune_trajectories=3,
        pretrain_steps=5,
        finetune_steps=5,
        fraction=1.0,
        seeds=[0, 1],
    )
    result = run_transfer_experiment(settings)
    assert len(result.table) == 2 * len(ARMS)
    assert set(result.summary["arm"]) == set(ARMS)
    assert (tmp_path / "experiment.csv").exists()
    assert (tmp_path / "experiment_summary.csv").exists()
    assert isinstance(result.accepted, bool)
