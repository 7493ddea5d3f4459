import dataclasses

import pytest

from splatdeblur import config
from splatdeblur.config import Config, ConfigError


def test_defaults():
    c = Config()
    assert (c.n_samples, c.latent_dim, c.substeps) == (9, 64, 4)
    assert (c.lambda_c, c.lambda_o, c.lambda_m) == (0.3, 1e-4, 1e-3)
    assert (c.warmup_gauss_iters, c.motion_start, c.weightmask_start, c.total_iters) == (200, 400, 800, 3000)
    assert c.estimator == "ode" and c.rigid and c.cmr and c.orth_loss and c.share_derivative


def test_text_round_trip():
    c = Config(seed=5, estimator="gru", cmr=False, lambda_o=2.5e-4)
    assert config.parse_text(c.to_text()) == c


def test_parse_comments_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# experiment\nn_samples = 5   # fewer poses\n\nrigid = false\n")
    c = config.load(p, {"seed": "3"})
    assert c.n_samples == 5 and c.rigid is False and c.seed == 3


@pytest.mark.parametrize("text", ["bogus = 1", "n_samples = five", "rigid = maybe", "estimator = rnn",
                                  "n_samples = 1", "motion_start = 5000", "lambda_c = 2", "lr_motion = 0",
                                  "just words"])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        config.parse_text(text)


def test_missing_file():
    with pytest.raises(ConfigError):
        config.load("/nonexistent/run.cfg")


def test_orth_loss_switch():
    assert Config(orth_loss=False).loss_weights().lambda_o == 0.0
    assert Config().loss_weights().lambda_o == 1e-4


def test_every_field_has_a_default():
    assert all(f.default is not dataclasses.MISSING for f in dataclasses.fields(Config))
