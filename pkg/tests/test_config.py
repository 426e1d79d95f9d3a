import json

import pytest

from safempc.config import DEFAULTS, ConfigError, default_config_path, dump_config, load_config, parse_config


def write(tmp_path, text, name="cfg.json"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_shipped_default_validates_and_matches_defaults():
    cfg = load_config(default_config_path())
    assert cfg.raw == parse_config(json.loads(json.dumps(DEFAULTS))).raw
    assert cfg.bo.n_iterations == 40 and cfg.bo.beta == 1.0 and cfg.rbf.count == 16
    assert cfg.target_soc == 0.8


def test_minimal_document_takes_defaults():
    cfg = parse_config({"schema_version": 1})
    assert cfg.hash == parse_config(json.loads(json.dumps(DEFAULTS))).hash


def test_hash_ignores_output_dir_but_not_seed():
    a = parse_config({"schema_version": 1, "output_dir": "x"})
    b = parse_config({"schema_version": 1, "output_dir": "y"})
    c = parse_config({"schema_version": 1, "seed": 5})
    assert a.hash == b.hash != c.hash
    assert a.with_seed(5).hash == c.hash


def test_schema_version_is_mandatory(tmp_path):
    with pytest.raises(ConfigError, match="schema_version"):
        load_config(write(tmp_path, '{"seed": 1}'))
    with pytest.raises(ConfigError, match="line 1"):
        load_config(write(tmp_path, '{"schema_version": 3}'))


def test_syntax_error_reports_line(tmp_path):
    text = '{\n  "schema_version": 1,\n  "seed": 1,,\n}\n'
    with pytest.raises(ConfigError) as exc:
        load_config(write(tmp_path, text))
    assert exc.value.line == 3


@pytest.mark.parametrize(
    "text,line,fragment",
    [
        ('{\n "schema_version": 1,\n "bo": {\n  "beta": -1\n }\n}', 4, "beta"),
        ('{\n "schema_version": 1,\n "mpc": {\n  "horizon_n": 10,\n  "gamma_t": "hot"\n }\n}', 5, "gamma_t"),
        ('{\n "schema_version": 1,\n "grid": {"soc_steps": 0}\n}', 3, "soc_steps"),
        ('{\n "schema_version": 1,\n "bogus": 1\n}', 3, "bogus"),
        ('{\n "schema_version": 1,\n "mpc": {\n  "n_screen": 4,\n  "n_random_starts": 5\n }\n}', 5, "n_screen"),
        ('{\n "schema_version": 1,\n "mpc": {\n  "horizon": 3\n }\n}', 4, "horizon"),
        ('{\n "schema_version": 1,\n\n "target_soc": 1.5\n}', 4, "target_soc"),
        ('{\n "schema_version": 1,\n "constraints": [\n  {"name": "a", "quantity": "voltage", "bound": 4.2},\n'
         '  {"name": "a", "quantity": "voltage", "bound": 2.5, "side": "lower"}\n ]\n}', 5, "duplicate"),
        ('{\n "schema_version": 1,\n "plant": {\n  "params_path": "missing.json"\n }\n}', 4, "does not exist"),
    ],
)
def test_schema_errors_are_line_precise(tmp_path, text, line, fragment):
    with pytest.raises(ConfigError) as exc:
        load_config(write(tmp_path, text))
    assert exc.value.line == line
    assert fragment in str(exc.value)


def test_relative_table_path_resolves_next_to_config(tmp_path):
    from safempc.battery_sim import load_params

    (tmp_path / "cell.json").write_text(json.dumps(load_params().to_dict()))
    cfg = load_config(write(tmp_path, '{"schema_version": 1, "plant": {"params_path": "cell.json"}}'))
    assert cfg.plant == load_params()


def test_dump_roundtrip(tmp_path):
    cfg = parse_config({"schema_version": 1, "seed": 4, "bo": {"n_iterations": 3}})
    again = load_config(write(tmp_path, dump_config(cfg)))
    assert again.hash == cfg.hash and again.bo.n_iterations == 3


def test_mpc_block_reaches_controller_config():
    cfg = parse_config({"schema_version": 1, "mpc": {"horizon_n": 4, "rbf_unit": 0.02}})
    m = cfg.mpc_config()
    assert m.horizon_n == 4 and m.weight_unit == 0.02


def test_grid_points():
    cfg = parse_config({"schema_version": 1, "grid": {"soc_range": [0.1, 0.5], "soc_steps": 3,
                                                      "t_range": [300, 310], "t_steps": 2}})
    assert cfg.grid.points() == ([0.1, 0.30000000000000004, 0.5], [300.0, 310.0])
