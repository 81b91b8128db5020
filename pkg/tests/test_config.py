import json

import pytest

from mixskd.config import (TrainConfig, apply_overrides, dump_text, from_flat, load_config, parse_text,
                           to_flat, to_json, valid_keys)
from mixskd.errors import InvalidConfigError


def test_defaults_validate_and_tag():
    cfg = TrainConfig()
    assert cfg.method() == "mixskd"
    assert cfg.weights.T == 3.0
    assert cfg.resolved_milestones() == (18, 26)  # 60% and 85% of 30 epochs


def test_method_tags():
    off = {f"enable_{k}": "false" for k in ("feature", "dis", "b_logit", "h", "f_logit")}
    assert apply_overrides(TrainConfig(), off).method() == "mixup-baseline"
    assert apply_overrides(TrainConfig(), {"enable_dis": "false"}).method() == "mixskd-ablation"
    assert apply_overrides(TrainConfig(), {"baseline": "true"}).method() == "ce-baseline"


def test_enable_h_maps_to_teacher_term():
    flags = apply_overrides(TrainConfig(), {"enable_h": "off"}).enabled()
    assert flags["cls_h"] is False and flags["f_logit"] is True


def test_override_types():
    cfg = apply_overrides(TrainConfig(), {"weights.T": "4", "network.channels": "4,8", "network.blocks": "1,2",
                                          "network.downsample": "false,true", "data.augment": "no",
                                          "milestones": "5,9", "schedule": "cosine"})
    assert cfg.weights.T == 4.0 and cfg.network.channels == (4, 8) and cfg.network.downsample == (False, True)
    assert cfg.data.augment is False and cfg.resolved_milestones() == (5, 9) and cfg.schedule == "cosine"


def test_unknown_key_lists_valid_keys():
    with pytest.raises(InvalidConfigError, match="valid keys: .*weights.T"):
        apply_overrides(TrainConfig(), {"weights.temp": "3"})


@pytest.mark.parametrize("pairs", [
    {"epochs": "abc"}, {"lr": "0"}, {"momentum": "1.0"}, {"schedule": "linear"}, {"warmup_epochs": "30"},
    {"network.channels": "4,8"}, {"data.source": "imagenet"}, {"weights.T": "-1"}, {"augment": "maybe"},
    {"adversarial_mode": "alternate"}, {"alpha": "0"},
])
def test_invalid_values(pairs):
    with pytest.raises(InvalidConfigError):
        apply_overrides(TrainConfig(), pairs)


def test_zero_epochs_allows_warmup():
    assert apply_overrides(TrainConfig(), {"epochs": "0"}).epochs == 0


def test_text_roundtrip(tmp_path):
    cfg = apply_overrides(TrainConfig(), {"weights.T": "2.5", "seed": "7", "network.channels": "3,5,7"})
    p = tmp_path / "c.cfg"
    p.write_text(dump_text(cfg))
    assert load_config(p) == cfg
    assert from_flat(to_flat(cfg)) == cfg


def test_parse_text_comments_and_errors():
    assert parse_text("# hi\nepochs = 3  # trailing\n\nlr=0.1\n") == {"epochs": "3", "lr": "0.1"}
    with pytest.raises(InvalidConfigError, match="cfg:2"):
        parse_text("epochs = 3\nnonsense\n", "cfg")


def test_overrides_win_over_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("weights.T = 5\nepochs = 4\n")
    cfg = load_config(p, {"weights.T": "3"})
    assert cfg.weights.T == 3.0 and cfg.epochs == 4


def test_json_echo_has_every_key():
    d = json.loads(to_json(TrainConfig()))
    assert set(d) == set(valid_keys())
