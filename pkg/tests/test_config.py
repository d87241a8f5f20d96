"""
実行設定の読み込み・検証のテスト
"""

import pytest

from mfbismut.config import (
    RunConfig,
    check_assumptions,
    list_presets,
    load_run_config,
    parse_config,
    preset_path,
)
from mfbismut.errors import ConfigParseError, ConfigValidationError
from mfbismut.experiment import build_setup


def write_config(tmp_path, text: str):
    path = tmp_path / "config.yaml"
    path.write_text(text, encoding="utf-8")
    return path


def test_list_presets():
    """同梱プリセットの一覧"""
    assert list_presets() == ["coulomb_probe", "gaussian_kernel_bench", "heat_semigroup", "linear_ou"]


@pytest.mark.parametrize("name", ["coulomb_probe", "gaussian_kernel_bench", "heat_semigroup", "linear_ou"])
def test_presets_pass_validation(name):
    """すべてのプリセットは仮定の検証を通る"""
    config = parse_config(preset_path(name))
    assert config.validation_report().passed


def test_unknown_preset():
    """存在しないプリセットは利用可能な名前を示す"""
    with pytest.raises(ConfigParseError, match="heat_semigroup"):
        preset_path("no_such_preset")


def test_heat_preset_values():
    """heat_semigroup プリセットの内容"""
    config = parse_config(preset_path("heat_semigroup"))
    assert config.model.d == 1
    assert config.kernel.kind == "zero"
    assert config.sim.N == 100000
    assert config.sim.seed == 20240601
    assert config.estimator.expected_total == pytest.approx(0.60653)


def test_empty_file_gives_defaults(tmp_path):
    """空のファイルは既定値"""
    config = parse_config(write_config(tmp_path, ""))
    assert config == RunConfig()


def test_unknown_key_reports_key_and_line(tmp_path):
    """未知のキーはキー名と行番号付きのエラー"""
    path = write_config(tmp_path, "model:\n  d: 1\n  foo: 2\n")
    with pytest.raises(ConfigParseError) as exc_info:
        parse_config(path)
    assert exc_info.value.key == "model.foo"
    assert exc_info.value.line == 3
    assert "未知のキー" in str(exc_info.value)


def test_out_of_range_value_reports_line(tmp_path):
    """範囲外の値は行番号付きのエラー"""
    path = write_config(tmp_path, "sim:\n  N: 0\n")
    with pytest.raises(ConfigParseError) as exc_info:
        parse_config(path)
    assert exc_info.value.key == "sim.N"
    assert exc_info.value.line == 2


def test_invalid_yaml_reports_line(tmp_path):
    """YAMLの構文エラーは行番号付き"""
    path = write_config(tmp_path, "model:\n  d: 1\n  T: [1.0\n")
    with pytest.raises(ConfigParseError) as exc_info:
        parse_config(path)
    assert exc_info.value.line is not None


def test_top_level_must_be_mapping(tmp_path):
    """最上位がリストの設定はエラー"""
    with pytest.raises(ConfigParseError):
        parse_config(write_config(tmp_path, "- model\n"))


def test_missing_file(tmp_path):
    """存在しないファイルはエラー"""
    with pytest.raises(ConfigParseError, match="見つかりません"):
        parse_config(tmp_path / "missing.yaml")


def test_dimension_mismatch(tmp_path):
    """ベクトルの長さが d と一致しない設定はエラー"""
    path = write_config(tmp_path, "model:\n  d: 2\ninitial:\n  kind: dirac\n  location: [0.0]\n")
    with pytest.raises(ConfigParseError):
        parse_config(path)


def test_presets_are_package_data():
    """プリセットはパッケージ内に同梱され、作業ディレクトリに依存しない"""
    path = preset_path("heat_semigroup")
    assert path.is_file()
    assert path.parent.name == "presets"
    assert path.parent.parent.name == "mfbismut"


def test_bench_preset_variation_direction():
    """gaussian_kernel_bench の varcheck は φ(x)=x と広がりのある初期分布を使う"""
    config = parse_config(preset_path("gaussian_kernel_bench"))
    assert config.initial.kind == "dirac"
    assert config.oracle.variation_phi.kind == "affine"
    assert config.oracle.variation_phi.matrix == [[1.0]]
    assert config.oracle.variation_initial.kind == "gaussian"
    assert config.oracle.variation_initial.scale == 0.25


def variation_config(location: list[float]) -> dict:
    return {
        "model": {"d": 2},
        "initial": {"kind": "dirac", "location": [0.0, 0.0]},
        "estimator": {"phi": {"kind": "constant", "vector": [1.0, 0.0]}},
        "oracle": {"variation_initial": {"kind": "gaussian", "location": location}},
    }


def test_variation_initial_dimension_mismatch():
    """oracle.variation_initial の長さが d と一致しない設定はエラー"""
    config = load_run_config(config_dict=variation_config([0.0, 1.0]))
    assert config.oracle.variation_initial.location == [0.0, 1.0]
    with pytest.raises(ConfigParseError):
        load_run_config(config_dict=variation_config([0.0]))


def test_epsilons_must_be_descending():
    """epsilons は相異なる降順"""
    with pytest.raises(ConfigParseError) as exc_info:
        load_run_config(config_dict={"oracle": {"epsilons": [0.01, 0.02, 0.04]}})
    assert exc_info.value.key == "oracle.epsilons"


def test_t_min_below_horizon():
    """oracle.t_min は T より小さい"""
    with pytest.raises(ConfigParseError):
        load_run_config(config_dict={"model": {"T": 0.5}, "oracle": {"t_min": 0.5}})


def test_inf_exponents_from_yaml(tmp_path):
    """k, k' には .inf を指定できる"""
    config = parse_config(write_config(tmp_path, "oracle:\n  k: .inf\n  k_prime: .inf\n"))
    assert config.oracle.k == float("inf")


def test_config_dict_takes_priority(tmp_path):
    """config_dict と config_path の両方があれば config_dict を優先する"""
    config = load_run_config(tmp_path / "missing.yaml", {"sim": {"seed": 5}})
    assert config.sim.seed == 5


def test_default_config():
    """引数なしでは既定の設定"""
    assert load_run_config() == RunConfig()


def test_digest_ignores_output():
    """ダイジェストは出力先に依存せず、seed には依存する"""
    base = RunConfig()
    moved = load_run_config(config_dict={"output": {"dir": "elsewhere"}})
    reseeded = load_run_config(config_dict={"sim": {"seed": 1}})
    assert base.digest() == moved.digest()
    assert base.digest() != reseeded.digest()
    assert len(base.digest()) == 64


def test_digest_ignores_key_order(tmp_path):
    """キーの順序や書式が違っても同じ設定なら同じダイジェスト"""
    first = write_config(tmp_path, "sim:\n  N: 50\n  seed: 4\nmodel:\n  T: 0.5\n")
    second = tmp_path / "reordered.yaml"
    second.write_text("model: {T: 0.5}\nsim: {seed: 4, N: 50}\n", encoding="utf-8")
    reordered = load_run_config(config_dict={"model": {"T": 0.5}, "sim": {"seed": 4, "N": 50}})
    assert parse_config(first).digest() == parse_config(second).digest()
    assert parse_config(first).digest() == reordered.digest()


def test_p_outside_admissible_interval():
    """coulomb プリセットで p を許容区間 (5, ∞) の外にすると検証エラー"""
    config = parse_config(preset_path("coulomb_probe"), check=False)
    changed = config.model_copy(update={"oracle": config.oracle.model_copy(update={"p": 4.0})})
    with pytest.raises(ConfigValidationError) as exc_info:
        check_assumptions(changed)
    assert "p ∈ 許容区間" in [name for name, _ in exc_info.value.failures]


def test_all_failures_are_listed(tmp_path):
    """失敗した条件はすべて列挙される"""
    text = preset_path("coulomb_probe").read_text(encoding="utf-8").replace("kappa: 0.5", "kappa: 0.2")
    path = write_config(tmp_path, text)
    with pytest.raises(ConfigValidationError) as exc_info:
        parse_config(path)
    names = [name for name, _ in exc_info.value.failures]
    assert "κ > β/2" in names
    assert len(names) >= 2
    # check=False なら読み込める
    assert parse_config(path, check=False).kernel.kappa == 0.2


def test_build_setup_grid_choice():
    """sim.grid=auto では特異なカーネルに graded グリッドを選ぶ"""
    heat = build_setup(parse_config(preset_path("heat_semigroup")))
    assert heat.grid.kind == "uniform"
    assert heat.config_digest == parse_config(preset_path("heat_semigroup")).digest()

    config = load_run_config(
        config_dict={"kernel": {"kind": "coulomb", "kappa": 0.5, "beta": 0.5, "delta": 0.01}},
        check=False,
    )
    assert build_setup(config).grid.kind == "graded"


def test_build_setup_resolves_delta():
    """coulomb で delta 未指定なら N^(-1/d) から自動設定し、警告する"""
    config = load_run_config(
        config_dict={
            "model": {"d": 1},
            "kernel": {"kind": "coulomb", "kappa": 0.5, "beta": 0.5},
            "sim": {"N": 100, "delta_factor": 2.0},
        },
        check=False,
    )
    with pytest.warns(UserWarning, match="正則化長"):
        setup = build_setup(config)
    assert setup.kernel.delta == pytest.approx(0.02)


def test_build_setup_seed_override():
    """seed 引数は sim.seed を上書きする"""
    setup = build_setup(RunConfig(), seed=99)
    assert setup.seed == 99
