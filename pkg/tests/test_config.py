import textwrap
from pathlib import Path

import pytest

from rfmsteer.cli import main
from rfmsteer.config import ConfigError, ExperimentConfig, load_config, parse_config

BASE = textwrap.dedent("""\
    seed: 3
    concepts:
      - {name: notes, kind: dominance, n_classes: 4, n_per_class: 10, seq_len: 16}
      - {name: beat, kind: period, periods: [2, 3], n_per_class: 10, seq_len: 16}
    model:
      n_layers: 3
      d_model: 8
    """)


def test_minimal_defaults():
    cfg = parse_config(BASE, "x.yaml")
    assert isinstance(cfg, ExperimentConfig)
    assert cfg.steer.p == (0.3,) and cfg.steer.weightings[0].kappa == 0.95
    assert cfg.steer.concepts == ("notes", "beat")
    assert cfg.ablate.concept == "notes" and cfg.trace.concept == "notes"
    assert cfg.model.n_layers == 3 and cfg.seed == 3


def test_digest_ignores_comments_and_order():
    a = parse_config(BASE)
    b = parse_config("# comment\n" + BASE.replace("seed: 3\n", "") + "seed: 3\n")
    assert a.digest() == b.digest()
    assert parse_config(BASE.replace("seed: 3", "seed: 4")).digest() != a.digest()


def test_range_message():
    text = BASE + "steer:\n  p: [0.3, 1.5]\n"
    with pytest.raises(ConfigError) as e:
        parse_config(text, "x.yaml")
    line = text.splitlines().index("  p: [0.3, 1.5]") + 1
    assert str(e.value) == f"x.yaml:{line}: steer.p[1]: 1.5 is above the allowed range (<= 1.0)"


def test_unknown_key_message():
    with pytest.raises(ConfigError) as e:
        parse_config("seed: 1\nbogus: 2\n" + BASE.replace("seed: 3\n", ""), "x.yaml")
    assert str(e.value) == "x.yaml:2: bogus: unknown key"


INVALID = [
    ("seed: -1", "seed"),
    ("seed: abc", "seed"),
    ("jobs: 0", "jobs"),
    ("model:\n  n_layers: 0", "model.n_layers"),
    ("model:\n  inject: middle", "model.inject"),
    ("model:\n  logit_scale: 0", "model.logit_scale"),
    ("probes:\n  poolings: [last]", "probes.poolings"),
    ("probes:\n  bandwidth: [10, 1]", "probes.bandwidth"),
    ("probes:\n  q: [0.5, 3.0]", "probes.q"),
    ("probes:\n  iterations: -2", "probes.iterations"),
    ("steer:\n  eta0: [0.1, .nan]", "steer.eta0[1]"),
    ("steer:\n  concepts: [drums]", "steer.concepts[0]"),
    ("steer:\n  schedules: [ramp]", "steer.schedules[0]"),
    ("steer:\n  weightings: [{kind: top-k}]", "steer.weightings[0].k"),
    ("steer:\n  weightings: [{kind: exponential, kappa: 1.5}]", "steer.weightings[0].kappa"),
    ("steer:\n  target_class: 9", "steer.target_class"),
    ("steer:\n  pairwise:\n    pairs: [[notes, notes]]", "steer.pairwise.pairs[0]"),
    ("steer:\n  pairwise:\n    pairs: [[notes, beat]]\n    combos: [[0.3]]", "steer.pairwise.combos[0]"),
    ("ablate:\n  concept: beat", "ablate.concept"),
    ("ablate:\n  k_values: [0]", "ablate.k_values[0]"),
    ("ablate:\n  kappas: [0.0]", "ablate.kappas[0]"),
    ("trace:\n  concept: beat", "trace.concept"),
    ("trace:\n  schedules: [sine, sine]", "trace.schedules"),
    ("trace:\n  smoothing: 0", "trace.smoothing"),
    ("trace:\n  extra: 1", "trace.extra"),
    ("steer: 5", "steer"),
]


@pytest.mark.parametrize("snippet,key", INVALID, ids=[k for _, k in INVALID])
def test_invalid_values_name_the_key(snippet, key, tmp_path, capsys):
    text = BASE.replace("model:\n  n_layers: 3\n  d_model: 8\n", "") if snippet.startswith("model:") else BASE
    if snippet.startswith("seed:"):
        text = text.replace("seed: 3\n", "")
    text = text + snippet + "\n"
    with pytest.raises(ConfigError) as e:
        parse_config(text, "x.yaml")
    assert f": {key}: " in str(e.value)
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    assert main(["gen-data", "-c", str(path), "-o", str(tmp_path / "out")]) == 1
    assert key in capsys.readouterr().err


@pytest.mark.parametrize("text,fragment", [
    ("concepts: []\n", "concepts"),
    ("concepts:\n  - {name: a, kind: dominance}\n  - {name: a, kind: motif}\n", "used twice"),
    ("concepts:\n  - {name: 1x, kind: motif}\n", "concepts[0].name"),
    ("concepts:\n  - {name: a, kind: blob}\n", "concepts[0].kind"),
    ("concepts:\n  - {name: a, kind: period, periods: [2, 2]}\n", "distinct"),
    ("seed: 1\nseed: 2\n", "duplicate"),
    ("seed: [1\n", "invalid YAML"),
    ("- 1\n- 2\n", "top level"),
])
def test_structural_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment.replace("[", r"\[").replace("]", r"\]")):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_shipped_configs_parse():
    for name in ("smoke", "acceptance"):
        cfg = load_config(Path(__file__).parents[1] / "configs" / f"{name}.yaml")
        assert cfg.concepts
