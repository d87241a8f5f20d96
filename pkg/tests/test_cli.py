"""
CLIのテスト
"""

import csv
import os
import subprocess
import sys

import pytest

from mfbismut.cli import main, with_seed
from mfbismut.config import RunConfig
from mfbismut.csv_io import read_digest

SMALL_CONFIG = """\
model:
  d: 1
  T: 1.0
kernel:
  kind: zero
sim:
  N: 200
  M: 20
  seed: 3
estimator:
  test_function:
    kind: sine
"""

INVALID_CONFIG = """\
model:
  d: 2
kernel:
  kind: coulomb
  kappa: 0.2
  beta: 0.5
  delta: 0.01
initial:
  kind: gaussian
  location: [0.0, 0.0]
sim:
  N: 20
  M: 5
oracle:
  p: 6.0
  k: 3.0
  k_prime: 1.25
"""

TRANSLATION_CONFIG = """\
model:
  d: 1
  T: 0.5
kernel:
  kind: gaussian_linear
  amplitude: 0.5
initial:
  kind: dirac
  location: [0.5]
sim:
  N: 40
  M: 10
  seed: 11
estimator:
  test_function:
    kind: sine
  phi:
    kind: constant
    vector: [1.0]
oracle:
  epsilons: [0.04, 0.02, 0.01]
"""


def write_config(tmp_path, text: str):
    path = tmp_path / "config.yaml"
    path.write_text(text, encoding="utf-8")
    return path


def read_rows(path):
    with open(path, encoding="utf-8") as f:
        f.readline()
        return list(csv.DictReader(f))


@pytest.mark.integration
def test_cli_presets_subprocess(project_root):
    """presets サブコマンドで同梱プリセットの一覧が表示されることをテスト"""
    env = {**os.environ, "PYTHONPATH": str(project_root / "src")}
    result = subprocess.run(
        [sys.executable, "-m", "mfbismut.cli", "presets"],
        capture_output=True,
        text=True,
        cwd=project_root,
        env=env,
    )
    assert result.returncode == 0
    assert result.stdout.split() == [
        "coulomb_probe",
        "gaussian_kernel_bench",
        "heat_semigroup",
        "linear_ou",
    ]


def test_validate_preset(tmp_path):
    """validate はプリセットの検証結果を validation.csv に書く"""
    assert main(["validate", "--preset", "heat_semigroup", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "validation.csv")
    names = [row["check"] for row in rows]
    assert "p ∈ 許容区間" in names
    assert "drift_jacobian" in names
    assert all(row["passed"] == "true" for row in rows)
    assert not (tmp_path / "failures.csv").exists()


def test_bismut_writes_three_rows(tmp_path):
    """bismut は term1, term2, total の3行を書く"""
    config = write_config(tmp_path, SMALL_CONFIG)
    out = tmp_path / "run"
    assert main(["bismut", "--config", str(config), "--out", str(out)]) == 0
    rows = read_rows(out / "bismut.csv")
    assert [row["quantity"] for row in rows] == ["term1", "term2", "total"]
    assert rows[1]["value"] == "0.0"
    assert rows[0]["n_particles"] == "200"
    assert rows[0]["n_steps"] == "20"
    assert rows[0]["seed"] == "3"


def test_bismut_is_byte_identical(tmp_path):
    """同じ設定・同じ seed なら出力CSVはバイト単位で一致する"""
    config = write_config(tmp_path, SMALL_CONFIG)
    assert main(["bismut", "--config", str(config), "--out", str(tmp_path / "a")]) == 0
    assert main(["bismut", "--config", str(config), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "bismut.csv").read_bytes() == (tmp_path / "b" / "bismut.csv").read_bytes()


def test_seed_option_changes_digest(tmp_path):
    """--seed は sim.seed を上書きし、digest も変わる"""
    config = write_config(tmp_path, SMALL_CONFIG)
    assert main(["simulate", "--config", str(config), "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--config", str(config), "--seed", "4", "--out", str(tmp_path / "b")]) == 0
    digest_a = read_digest(tmp_path / "a" / "positions.csv")
    digest_b = read_digest(tmp_path / "b" / "positions.csv")
    assert digest_a != digest_b


def test_simulate_records_flow(tmp_path):
    """sim.record_flow では flow/ に節点ごとの位置を書く"""
    config = write_config(tmp_path, SMALL_CONFIG.replace("  seed: 3\n", "  seed: 3\n  record_flow: true\n"))
    assert main(["simulate", "--config", str(config), "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "flow" / "flow_0.csv").exists()
    assert (tmp_path / "run" / "flow" / "flow_20.csv").exists()


def test_failed_validation_exits_with_one(tmp_path):
    """validate で条件を満たさない場合は failures.csv を書いて1を返す"""
    config = write_config(tmp_path, INVALID_CONFIG)
    assert main(["validate", "--config", str(config), "--out", str(tmp_path / "run")]) == 1
    rows = read_rows(tmp_path / "run" / "failures.csv")
    assert "κ > β/2" in [row["check"] for row in rows]
    assert (tmp_path / "run" / "validation.csv").exists()


def test_invalid_config_blocks_other_subcommands(tmp_path):
    """仮定を満たさない設定では推定を行わず1を返す"""
    config = write_config(tmp_path, INVALID_CONFIG)
    assert main(["bismut", "--config", str(config), "--out", str(tmp_path / "run")]) == 1
    assert (tmp_path / "run" / "failures.csv").exists()
    assert not (tmp_path / "run" / "bismut.csv").exists()


def test_missing_config_file(tmp_path, capsys):
    """存在しない設定ファイルはエラー"""
    assert main(["bismut", "--config", str(tmp_path / "missing.yaml")]) == 1
    assert "見つかりません" in capsys.readouterr().err


def test_missing_config_writes_failures(tmp_path):
    """--out があれば設定を読めない場合も failures.csv を書く"""
    out = tmp_path / "run"
    assert main(["bismut", "--config", str(tmp_path / "missing.yaml"), "--out", str(out)]) == 1
    rows = read_rows(out / "failures.csv")
    assert [row["check"] for row in rows] == ["config"]
    assert "見つかりません" in rows[0]["detail"]
    assert read_digest(out / "failures.csv") == ""


def test_invalid_seed_writes_failures(tmp_path):
    """範囲外の --seed も設定エラーとして failures.csv に残る"""
    config = write_config(tmp_path, SMALL_CONFIG)
    out = tmp_path / "run"
    assert main(["simulate", "--config", str(config), "--seed", "-1", "--out", str(out)]) == 1
    rows = read_rows(out / "failures.csv")
    assert rows[0]["check"] == "config"
    assert "seed" in rows[0]["detail"]


def test_varcheck_translated_start(tmp_path):
    """ディラック初期分布と定数方向（純粋な平行移動）でも varcheck は成功する"""
    config = write_config(tmp_path, TRANSLATION_CONFIG)
    out = tmp_path / "run"
    assert main(["varcheck", "--config", str(config), "--out", str(out)]) == 0
    assert not (out / "failures.csv").exists()
    assert len(read_rows(out / "varcheck.csv")) == 3


@pytest.mark.slow
def test_varcheck_bench_preset(tmp_path):
    """gaussian_kernel_bench の varcheck は次数の判定に成功する"""
    assert main(["varcheck", "--preset", "gaussian_kernel_bench", "--out", str(tmp_path)]) == 0
    assert not (tmp_path / "failures.csv").exists()


@pytest.mark.slow
def test_coulomb_preset_scaling_exponent(tmp_path):
    """coulomb_probe の M(t) の傾きは理論指数を下回らない"""
    assert main(["scaling-probe", "--preset", "coulomb_probe", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "scaling.csv").exists()
    assert not (tmp_path / "failures.csv").exists()


def test_config_source_required(capsys):
    """--config も --preset もない場合はエラー"""
    assert main(["bismut"]) == 1
    assert "--config または --preset" in capsys.readouterr().err


def test_config_and_preset_are_exclusive():
    """--config と --preset は同時に指定できない"""
    with pytest.raises(SystemExit):
        main(["bismut", "--config", "a.yaml", "--preset", "heat_semigroup"])


def test_with_seed():
    """seed は64ビット非負整数"""
    assert with_seed(RunConfig(), 12).sim.seed == 12
    with pytest.raises(ValueError):
        with_seed(RunConfig(), -1)
    with pytest.raises(ValueError):
        with_seed(RunConfig(), 2**64)
