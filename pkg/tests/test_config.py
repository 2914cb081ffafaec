"""Key=value experiment files and their resolution into typed configs."""

import pytest

from ptu.config import DatasetRef, config_from_kv, load_config, parse_kv_text
from ptu.errors import ConfigError

REGISTRY = """
dataset.digits.images=data/d-i.idx
dataset.digits.labels=data/d-l.idx
dataset.digits.classes=10
dataset.greek.images=data/g-i.idx
dataset.greek.labels=data/g-l.idx
dataset.greek.classes=24
"""

FULL = REGISTRY + """
setting=pair_demo
arch=rnn
methods=notl,ft,ptu,rg,knn
source.dataset=digits
target.dataset=greek
train.lr_candidates=0.01,0.001
train.lr_candidates.ft=0.01,0.001,0.0001
train.max_steps=1500
train.seed=3
split.train=0.7
reg.group=0.01
rnn.hidden=64
knn.k=1,5
out=runs/pair_demo
"""


class TestParseKvText:
    def test_basic_lines_comments_and_blanks(self):
        kv = parse_kv_text("# header\n\na=1\n b.c = two \n")
        assert kv == {"a": "1", "b.c": "two"}

    def test_later_duplicate_wins(self):
        assert parse_kv_text("k=old\nk=new")["k"] == "new"

    def test_value_may_contain_equals(self):
        assert parse_kv_text("cmd=a=b")["cmd"] == "a=b"

    def test_malformed_line_names_origin_and_number(self):
        with pytest.raises(ConfigError, match=r"demo\.cfg:3"):
            parse_kv_text("a=1\n\nnot a pair", origin="demo.cfg")

    def test_empty_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_kv_text("=value")


class TestConfigResolution:
    def test_defaults_from_empty_input(self):
        cfg = config_from_kv({})
        assert cfg.setting == "experiment"
        assert cfg.arch == "rnn"
        assert cfg.methods == ("notl", "ft", "ptu")
        assert cfg.train.lr_candidates == (0.01, 0.001)
        assert cfg.train.learning_rate == 0.01
        assert (cfg.train.batch_size, cfg.train.max_steps, cfg.train.val_every) \
            == (128, 1000, 100)
        assert (cfg.split.train_frac, cfg.split.val_frac, cfg.split.test_frac) \
            == (0.7, 0.15, 0.15)
        assert cfg.split.stratified
        assert cfg.knn_k == (1, 3, 5, 10)
        assert (cfg.rnn_hidden, cfg.cnn_preset) == (128, "tiny")
        assert cfg.source_checkpoint == "runs/experiment_source.ptuc"

    def test_full_file_resolves_every_field(self):
        cfg = config_from_kv(parse_kv_text(FULL))
        assert cfg.setting == "pair_demo"
        assert cfg.methods == ("notl", "ft", "ptu", "rg", "knn")
        assert cfg.registry == {
            "digits": DatasetRef("data/d-i.idx", "data/d-l.idx", 10),
            "greek": DatasetRef("data/g-i.idx", "data/g-l.idx", 24)}
        assert (cfg.source_dataset, cfg.target_dataset) == ("digits", "greek")
        assert cfg.lr_overrides == {"ft": (0.01, 0.001, 0.0001)}
        assert cfg.train.max_steps == 1500
        assert cfg.train.seed == 3
        assert cfg.train.penalty.group == 0.01
        assert cfg.rnn_hidden == 64
        assert cfg.knn_k == (1, 5)
        assert cfg.out_dir == "runs/pair_demo"
        assert cfg.source_checkpoint == "runs/pair_demo/pair_demo_source.ptuc"

    def test_seed_and_out_overrides_beat_the_file(self):
        cfg = config_from_kv(parse_kv_text(FULL), seed_override=9, out_override="elsewhere")
        assert cfg.train.seed == 9
        assert cfg.out_dir == "elsewhere"
        assert cfg.source_checkpoint == "elsewhere/pair_demo_source.ptuc"

    def test_explicit_checkpoint_respected(self):
        kv = parse_kv_text(FULL + "source.checkpoint=ckpt/custom.ptuc\n")
        assert config_from_kv(kv).source_checkpoint == "ckpt/custom.ptuc"

    def test_bool_spellings(self):
        for text, want in (("true", True), ("1", True), ("yes", True),
                           ("false", False), ("0", False), ("no", False)):
            cfg = config_from_kv(parse_kv_text(f"split.stratified={text}"))
            assert cfg.split.stratified is want
        with pytest.raises(ConfigError, match="split.stratified"):
            config_from_kv(parse_kv_text("split.stratified=maybe"))

    @pytest.mark.parametrize("line,hint", [
        ("train.batch_size=twelve", "train.batch_size"),
        ("train.lr_candidates=0.1,x", "train.lr_candidates"),
        ("arch=mlp", "arch"),
        ("methods=ptu,bogus", "bogus"),
        ("methods=", "at least one"),
        ("cnn.preset=vgg", "cnn.preset"),
        ("split.train=0.9\nsplit.val=0.3", "sum to 1"),
        ("train.lr=0.5", "not in candidates"),
    ])
    def test_bad_values_name_the_key(self, line, hint):
        with pytest.raises(ConfigError, match=hint):
            config_from_kv(parse_kv_text(line))

    def test_unregistered_target_rejected(self):
        kv = parse_kv_text(REGISTRY + "target.dataset=cyrillic")
        with pytest.raises(ConfigError, match="cyrillic"):
            config_from_kv(kv)

    def test_incomplete_registry_entry_rejected(self):
        kv = parse_kv_text("dataset.digits.images=a\ndataset.digits.classes=10")
        with pytest.raises(ConfigError, match="dataset.digits needs"):
            config_from_kv(kv)

    def test_ref_lookup(self):
        cfg = config_from_kv(parse_kv_text(FULL))
        assert cfg.ref("greek").classes == 24
        with pytest.raises(ConfigError):
            cfg.ref("linear_b")


class TestLoadConfig:
    def test_round_trip_through_a_file(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text(FULL)
        assert load_config(path).setting == "pair_demo"

    def test_parse_error_names_the_file(self, tmp_path):
        path = tmp_path / "broken.cfg"
        path.write_text("fine=1\nbroken line\n")
        with pytest.raises(ConfigError, match=r"broken\.cfg:2"):
            load_config(path)
