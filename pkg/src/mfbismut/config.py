"""
実行設定（YAML）の読み込みと検証

設定ファイルは model / kernel / drift / diffusion / initial / sim / estimator / oracle /
output の各セクションからなる。未知のキーはすべてエラーとする。
"""

import hashlib
import json
import math
from importlib import resources
try:
    from importlib.resources.abc import Traversable
except ModuleNotFoundError:  # Python 3.10
    from importlib.abc import Traversable
from pathlib import Path
from typing import Any, Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .bismut import BetaKind
from .ensemble import InitialLaw, check_law
from .errors import ConfigParseError, ConfigValidationError
from .params import (
    AssumptionParams,
    DiffusionSpec,
    DriftSpec,
    KernelSpec,
    ValidationReport,
    build_coefficients,
    validate_assumptions,
)
from .simulator import TestFunction
from .variation import PhiSpec

# 同梱プリセットの置き場所（パッケージデータとして配布する）
PRESET_DIR = resources.files("mfbismut") / "presets"


class ModelSection(BaseModel):
    """モデルの次元と時間区間"""

    model_config = ConfigDict(extra="forbid")

    d: int = Field(default=1, ge=1, le=16, description="次元 d")
    T: float = Field(default=1.0, gt=0, description="終端時刻 T")


class SimSection(BaseModel):
    """粒子シミュレーションの設定"""

    model_config = ConfigDict(extra="forbid")

    N: int = Field(default=1000, ge=1, description="粒子数 N")
    M: int = Field(default=200, ge=1, description="時間ステップ数 M")
    grid: Literal["auto", "uniform", "graded"] = Field(
        default="auto",
        description="時間グリッド: auto=κ>0 または k<∞ なら graded、それ以外は uniform",
    )
    gamma: float = Field(default=2.0, ge=1, description="graded グリッドの指数 γ")
    seed: int = Field(default=0, ge=0, lt=2**64, description="乱数 seed（64ビット）")
    delta_factor: float = Field(
        default=1.0, gt=0, description="kernel.delta が null のときの δ = delta_factor·N^(-1/d)"
    )
    record_flow: bool = Field(
        default=False, description="simulate で各節点の位置を flow/flow_<step>.csv に保存する"
    )


class EstimatorSection(BaseModel):
    """Bismut 型推定量の設定"""

    model_config = ConfigDict(extra="forbid")

    beta: BetaKind = Field(default="linear", description="重み β の種類: linear / smoothstep")
    test_function: TestFunction = Field(default_factory=TestFunction)
    phi: PhiSpec = Field(default_factory=PhiSpec)
    ensemble_mode: Literal["single", "two"] = Field(
        default="single",
        description="single=同じアンサンブルをフローにも使う, two=独立なアンサンブルのフローを使う",
    )
    expected_total: float | None = Field(
        default=None, description="既知の真値（指定時は bismut で 3·SE 以内かを判定する）"
    )


class OracleSection(BaseModel):
    """有限差分・Girsanov・スケーリング診断の設定"""

    model_config = ConfigDict(extra="forbid")

    epsilons: list[float] = Field(
        default_factory=lambda: [0.04, 0.02, 0.01, 0.005],
        description="摂動幅 ε（正・相異なる・降順）",
    )
    fd_epsilon: float = Field(default=0.01, gt=0, description="fd-check で Bismut と比較する ε")
    t_min: float = Field(default=0.01, gt=0, description="スケーリング診断の最小時刻")
    n_probe: int = Field(default=8, ge=3, description="スケーリング診断の時刻数（対数等間隔）")
    probe_times: list[float] | None = Field(
        default=None, description="スケーリング診断の時刻（指定時は t_min/n_probe より優先）"
    )
    z_mode: Literal["paired", "fixed"] = Field(
        default="paired", description="paired: z=独立な粒子, fixed: 小さな z グリッド上の最大値"
    )
    p: float = Field(default=2.0, gt=1, description="モーメント指数 p")
    k: float = Field(default=math.inf, gt=0, description="‖h_t‖ の可積分指数 k（.inf=有界）")
    k_prime: float = Field(default=math.inf, gt=0, description="‖∇h_t‖ の可積分指数 k'（.inf=有界）")
    girsanov_moment: float = Field(default=1.0, ge=1, description="E|R-1|^n の指数 n")
    moment_bound_factor: float = Field(
        default=100.0, gt=0, description="sup_t mean|v_t|^p / mean|v_0|^p の許容倍率"
    )
    theta: float | None = Field(
        default=None, description="カーネル差分診断の指数 θ（null なら許容区間の中点）"
    )
    variation_phi: PhiSpec | None = Field(
        default=None, description="varcheck の方向 φ（null なら estimator.phi）"
    )
    variation_initial: InitialLaw | None = Field(
        default=None, description="varcheck の初期分布（null なら initial）"
    )

    @field_validator("epsilons")
    @classmethod
    def validate_epsilons(cls, value: list[float]) -> list[float]:
        if not value:
            raise ValueError("epsilons は空にできません")
        if any(not (eps > 0 and math.isfinite(eps)) for eps in value):
            raise ValueError("epsilons はすべて正である必要があります")
        if any(a <= b for a, b in zip(value, value[1:], strict=False)):
            raise ValueError("epsilons は相異なる降順で指定してください")
        return value


class OutputSection(BaseModel):
    """出力先"""

    model_config = ConfigDict(extra="forbid")

    dir: str = Field(default="runs/latest", description="成果物（CSV）の出力ディレクトリ")


class RunConfig(BaseModel):
    """実行設定全体"""

    model_config = ConfigDict(extra="forbid")

    model: ModelSection = Field(default_factory=ModelSection)
    kernel: KernelSpec = Field(default_factory=KernelSpec)
    drift: DriftSpec = Field(default_factory=DriftSpec)
    diffusion: DiffusionSpec = Field(default_factory=DiffusionSpec)
    initial: InitialLaw = Field(default_factory=InitialLaw)
    sim: SimSection = Field(default_factory=SimSection)
    estimator: EstimatorSection = Field(default_factory=EstimatorSection)
    oracle: OracleSection = Field(default_factory=OracleSection)
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def validate_dimensions(self) -> "RunConfig":
        """ベクトル・行列の大きさを model.d と照合する"""
        d = self.model.d
        check_law(self.initial, d)
        build_coefficients(self.drift, self.diffusion, d)
        origin = np.zeros((1, d))
        self.estimator.phi.apply(origin)
        self.estimator.test_function.evaluate(origin)
        if self.oracle.variation_initial is not None:
            check_law(self.oracle.variation_initial, d)
        if self.oracle.variation_phi is not None:
            self.oracle.variation_phi.apply(origin)
        if self.oracle.probe_times is not None and any(
            not 0 < t <= self.model.T for t in self.oracle.probe_times
        ):
            raise ValueError("oracle.probe_times は (0, T] にある必要があります")
        if self.oracle.t_min >= self.model.T:
            raise ValueError("oracle.t_min は T より小さい必要があります")
        return self

    def assumption_params(self) -> AssumptionParams:
        return AssumptionParams(
            d=self.model.d,
            T=self.model.T,
            kappa=self.kernel.kappa,
            beta=self.kernel.beta,
            k=self.oracle.k,
            k_prime=self.oracle.k_prime,
            p=self.oracle.p,
        )

    def validation_report(self) -> ValidationReport:
        return validate_assumptions(self.assumption_params(), self.kernel)

    def digest(self) -> str:
        """出力先を除いた正規化設定の SHA-256"""
        payload = self.model_dump(mode="python", exclude={"output"})
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _node_line(node: yaml.Node | None, loc: tuple[Any, ...]) -> int | None:
    """YAML ノード木で loc をたどり、最後に見つかったキーの行番号（1始まり）を返す"""
    line = None
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                if key_node.value == str(part):
                    line = key_node.start_mark.line + 1
                    node = value_node
                    break
            else:
                return line
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int):
            if part >= len(node.value):
                return line
            node = node.value[part]
            line = node.start_mark.line + 1
        else:
            return line
    return line


def _parse_error(e: ValidationError, root: yaml.Node | None) -> ConfigParseError:
    errors = e.errors()
    first = errors[0]
    key = ".".join(str(part) for part in first["loc"]) or None
    messages = []
    for error in errors:
        where = ".".join(str(part) for part in error["loc"]) or "(設定全体)"
        if error["type"] == "extra_forbidden":
            messages.append(f"{where}: 未知のキーです")
        else:
            messages.append(f"{where}: {error['msg']}")
    return ConfigParseError("; ".join(messages), key=key, line=_node_line(root, first["loc"]))


def check_assumptions(config: RunConfig) -> ValidationReport:
    """
    仮定の検証を行い、失敗があれば例外を送出する

    Raises:
        ConfigValidationError: 失敗した条件をすべて列挙する
    """
    report = config.validation_report()
    if not report.passed:
        raise ConfigValidationError([(check.name, check.detail) for check in report.failures()])
    return report


def parse_config(path: str | Path, *, check: bool = True) -> RunConfig:
    """
    設定ファイルを読み込み、既定値を補って RunConfig を返す

    Args:
        path: YAMLファイルのパス
        check: 仮定（定理の条件）の検証も行う

    Raises:
        ConfigParseError: ファイルがない・YAMLが不正・未知のキー・型や範囲の誤り
        ConfigValidationError: 仮定の検証に失敗した場合
    """
    config_file = Path(path)
    if not config_file.exists():
        raise ConfigParseError(f"設定ファイルが見つかりません: {path}")

    text = config_file.read_text(encoding="utf-8")
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigParseError(f"YAML形式が不正です: {e}", line=line) from e

    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigParseError("設定ファイルの最上位はマッピングである必要があります", line=1)

    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise _parse_error(e, root) from e

    if check:
        check_assumptions(config)
    return config


def load_run_config(
    config_path: str | Path | None = None,
    config_dict: dict | None = None,
    *,
    check: bool = True,
) -> RunConfig:
    """
    実行設定をYAMLファイルまたは辞書から読み込む

    config_dict と config_path の両方が指定された場合は config_dict を優先する。
    どちらもない場合は既定の設定を返す。
    """
    if config_dict is not None:
        try:
            config = RunConfig.model_validate(config_dict)
        except ValidationError as e:
            raise _parse_error(e, None) from e
    elif config_path is None:
        config = RunConfig()
    else:
        return parse_config(config_path, check=check)

    if check:
        check_assumptions(config)
    return config


def list_presets(preset_dir: Traversable = PRESET_DIR) -> list[str]:
    """同梱プリセット名の一覧"""
    return sorted(
        entry.name.removesuffix(".yaml")
        for entry in preset_dir.iterdir()
        if entry.is_file() and entry.name.endswith(".yaml")
    )


def preset_path(name: str, preset_dir: Traversable = PRESET_DIR) -> Path:
    """
    プリセット名から設定ファイルのパスを返す

    Raises:
        ConfigParseError: 該当するプリセットがない場合
    """
    entry = preset_dir / f"{name}.yaml"
    if not entry.is_file():
        available = ", ".join(list_presets(preset_dir)) or "（なし）"
        raise ConfigParseError(f"プリセット '{name}' はありません（利用可能: {available}）")
    return Path(str(entry))
