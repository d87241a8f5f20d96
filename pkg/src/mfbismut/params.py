"""
相互作用カーネル・SDE係数・仮定のパラメータ検証

カーネル h_t, ドリフト b, 拡散 σ とその導出量 a=σσ*, ζ=a⁻¹σ を定義する。
すべての関数は入力のみに依存する純関数で、並列に呼び出してよい。
"""

import math
import warnings
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import NonFinite, OutOfRange, SingularDiffusion, SingularEvaluation

KernelKind = Literal["zero", "gaussian_linear", "coulomb"]

# ζ の計算で許容する a=σσ* の条件数の上限
MAX_CONDITION_NUMBER = 1e12


# ---------------------------------------------------------------------------
# 相互作用カーネル
# ---------------------------------------------------------------------------


class KernelSpec(BaseModel):
    """パラメトリックな相互作用カーネル h_t の設定"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: KernelKind = Field(
        default="zero",
        description="カーネルの種類: zero=相互作用なし, gaussian_linear=c t^κ z exp(-|z|²), coulomb=c t^κ z/(|z|²+δ²)^((β+1)/2)",
    )
    amplitude: float = Field(default=1.0, description="カーネルのスケール c")
    kappa: float = Field(default=0.0, ge=0, description="時間指数 κ")
    beta: float = Field(default=0.0, ge=0, lt=1, description="空間特異性の指数 β（coulombのみ使用）")
    delta: float | None = Field(
        default=None,
        ge=0,
        description="正則化長 δ。nullの場合、coulombでは sim.delta_factor·N^(-1/d)、それ以外は0",
    )


def resolve_kernel(spec: KernelSpec, n_particles: int, dim: int, delta_factor: float) -> KernelSpec:
    """
    δ が未指定（None）のカーネルに既定の正則化長を設定する

    coulomb の場合 δ = delta_factor·N^(-1/d)、それ以外は δ = 0。
    """
    if spec.delta is not None:
        return spec
    if spec.kind != "coulomb":
        return spec.model_copy(update={"delta": 0.0})
    delta = delta_factor * n_particles ** (-1.0 / dim)
    warnings.warn(
        f"coulombカーネルの正則化長を自動設定しました: delta={delta:.6g}",
        stacklevel=2,
    )
    return spec.model_copy(update={"delta": delta})


def _time_factor(spec: KernelSpec, t: float) -> float:
    if not t > 0:
        raise OutOfRange(f"カーネルの時刻は正である必要があります: t={t}")
    return spec.amplitude * t**spec.kappa


def _squared_radius(spec: KernelSpec, z: np.ndarray) -> np.ndarray:
    sq = np.sum(z * z, axis=-1)
    delta = spec.delta or 0.0
    if spec.kind == "coulomb" and delta == 0.0 and np.any(sq == 0.0):
        raise SingularEvaluation()
    return sq


def _ensure_finite(values: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NonFinite(what)
    return values


def kernel_eval(spec: KernelSpec, t: float, z: np.ndarray) -> np.ndarray:
    """
    h_t(z) を評価する

    Args:
        spec: カーネル設定
        t: 時刻（t > 0）
        z: 形状 (..., d) の配列

    Returns:
        z と同じ形状の配列

    Raises:
        SingularEvaluation: coulomb, δ=0 で z=0 を評価した場合
        NonFinite: 結果に NaN/Inf が含まれる場合
    """
    z = np.asarray(z, dtype=float)
    if spec.kind == "zero":
        return np.zeros_like(z)
    scale = _time_factor(spec, t)
    sq = _squared_radius(spec, z)
    if spec.kind == "gaussian_linear":
        weight = scale * np.exp(-sq)
    else:
        delta = spec.delta or 0.0
        weight = scale * (sq + delta * delta) ** (-(spec.beta + 1.0) / 2.0)
    return _ensure_finite(weight[..., None] * z, "kernel_eval")


def pair_differences(
    x: np.ndarray, y: np.ndarray, rows: slice, exclude_self: bool
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray] | None]:
    """
    粒子 rows と y の全粒子との差 x^i - y^j（形状 (rows, n_y, d)）を返す

    exclude_self の場合は対角 j=i に仮の値を入れ、評価後に0にすべき位置を返す。
    """
    diffs = x[rows, None, :] - y[None, :, :]
    if not exclude_self:
        return diffs, None
    local = np.arange(rows.stop - rows.start)
    diagonal = (local, local + rows.start)
    # 対角は評価後に捨てるので、特異点を避ける任意の非零値でよい
    diffs[diagonal] = 1.0
    return diffs, diagonal


def kernel_grad(spec: KernelSpec, t: float, z: np.ndarray) -> np.ndarray:
    """
    z ↦ h_t(z) のヤコビ行列 ∂_j h_i を評価する

    Returns:
        形状 (..., d, d) の配列
    """
    z = np.asarray(z, dtype=float)
    d = z.shape[-1]
    if spec.kind == "zero":
        return np.zeros(z.shape + (d,))
    scale = _time_factor(spec, t)
    sq = _squared_radius(spec, z)
    eye = np.eye(d)
    outer = z[..., :, None] * z[..., None, :]
    if spec.kind == "gaussian_linear":
        weight = scale * np.exp(-sq)
        grad = weight[..., None, None] * (eye - 2.0 * outer)
    else:
        delta = spec.delta or 0.0
        r2 = sq + delta * delta
        inner = r2 ** (-(spec.beta + 1.0) / 2.0)
        outer_weight = (spec.beta + 1.0) * r2 ** (-(spec.beta + 3.0) / 2.0)
        grad = scale * (inner[..., None, None] * eye - outer_weight[..., None, None] * outer)
    return _ensure_finite(grad, "kernel_grad")


# ---------------------------------------------------------------------------
# SDE係数
# ---------------------------------------------------------------------------

Field2 = Callable[[float, np.ndarray], np.ndarray]
Field3 = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


class DriftSpec(BaseModel):
    """ドリフト b_t(x) の組み込みファミリー"""

    model_config = ConfigDict(extra="forbid")

    family: Literal["zero", "constant", "linear"] = Field(
        default="zero", description="zero: b=0, constant: b=c, linear: b(x)=A x + c"
    )
    matrix: list[list[float]] | None = Field(default=None, description="linear の行列 A（d×d）")
    vector: list[float] | None = Field(default=None, description="定数項 c（長さ d）")


class DiffusionSpec(BaseModel):
    """拡散係数 σ_t(x) の組み込みファミリー"""

    model_config = ConfigDict(extra="forbid")

    family: Literal["constant", "diagonal_state"] = Field(
        default="constant",
        description="constant: σ=S, diagonal_state: σ_ii(x)=s_i(1+r_i sin x_i)",
    )
    matrix: list[list[float]] | None = Field(
        default=None, description="constant の行列 S（省略時は scale·I）"
    )
    scale: float | list[float] = Field(default=1.0, description="スケール s（スカラーまたは長さ d）")
    amplitude: float | list[float] = Field(
        default=0.0, description="diagonal_state の変調振幅 r（|r|<1）"
    )


@dataclass(frozen=True)
class CoefficientSet:
    """
    ドリフト・拡散係数と解析的なヤコビ行列

    各関数は形状 (..., d) の位置配列を受け取り、先頭の次元をそのまま保つ。
    diffusion_jacobian(t, x, v) は方向微分 ∇_v σ_t(x)（形状 (..., d, d)）を返す。
    """

    dim: int
    drift: Field2
    drift_jacobian: Field2
    diffusion: Field2
    diffusion_jacobian: Field3
    constant_diffusion: bool = False
    name: str = field(default="custom", compare=False)


def _as_vector(value: float | list[float] | None, dim: int, name: str, default: float) -> np.ndarray:
    if value is None:
        return np.full(dim, default)
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.shape == (1,):
        return np.full(dim, arr[0])
    if arr.shape != (dim,):
        raise ValueError(f"{name} の長さが次元 d={dim} と一致しません: {arr.shape}")
    return arr


def _as_matrix(value: list[list[float]] | None, dim: int, name: str) -> np.ndarray | None:
    if value is None:
        return None
    arr = np.asarray(value, dtype=float)
    if arr.shape != (dim, dim):
        raise ValueError(f"{name} の形状が ({dim}, {dim}) ではありません: {arr.shape}")
    return arr


def build_coefficients(drift: DriftSpec, diffusion: DiffusionSpec, dim: int) -> CoefficientSet:
    """
    組み込みファミリーから CoefficientSet を構築する

    Raises:
        ValueError: ベクトル・行列の形状が次元と一致しない場合、または |r| ≥ 1 の場合
    """
    offset = _as_vector(drift.vector, dim, "drift.vector", 0.0)
    if drift.family == "linear":
        a_matrix = _as_matrix(drift.matrix, dim, "drift.matrix")
        if a_matrix is None:
            raise ValueError("drift.family=linear には drift.matrix が必要です")
    else:
        a_matrix = np.zeros((dim, dim))
        if drift.family == "zero":
            offset = np.zeros(dim)

    def b(t: float, x: np.ndarray) -> np.ndarray:
        return x @ a_matrix.T + offset

    def grad_b(t: float, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(a_matrix, x.shape[:-1] + (dim, dim))

    scale = _as_vector(diffusion.scale, dim, "diffusion.scale", 1.0)
    if diffusion.family == "constant":
        s_matrix = _as_matrix(diffusion.matrix, dim, "diffusion.matrix")
        if s_matrix is None:
            s_matrix = np.diag(scale)

        def sigma(t: float, x: np.ndarray) -> np.ndarray:
            return np.broadcast_to(s_matrix, x.shape[:-1] + (dim, dim))

        def grad_sigma(t: float, x: np.ndarray, v: np.ndarray) -> np.ndarray:
            return np.zeros(x.shape[:-1] + (dim, dim))

        return CoefficientSet(
            dim=dim,
            drift=b,
            drift_jacobian=grad_b,
            diffusion=sigma,
            diffusion_jacobian=grad_sigma,
            constant_diffusion=True,
            name=f"{drift.family}/constant",
        )

    amplitude = _as_vector(diffusion.amplitude, dim, "diffusion.amplitude", 0.0)
    if np.any(np.abs(amplitude) >= 1.0):
        raise ValueError("diffusion.amplitude は |r| < 1 である必要があります（a の可逆性）")
    eye = np.eye(dim)

    def sigma_state(t: float, x: np.ndarray) -> np.ndarray:
        diag = scale * (1.0 + amplitude * np.sin(x))
        return diag[..., :, None] * eye

    def grad_sigma_state(t: float, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        diag = scale * amplitude * np.cos(x) * v
        return diag[..., :, None] * eye

    return CoefficientSet(
        dim=dim,
        drift=b,
        drift_jacobian=grad_b,
        diffusion=sigma_state,
        diffusion_jacobian=grad_sigma_state,
        constant_diffusion=False,
        name=f"{drift.family}/diagonal_state",
    )


def zeta(coeffs: CoefficientSet, t: float, x: np.ndarray) -> np.ndarray:
    """
    ζ = (σσ*)⁻¹σ を (t, x) で評価する（ζσ* = I）

    正方で可逆な σ では (σσ*)⁻¹σ = σ⁻ᵀ で、これは σ*(σσ*)⁻¹ = σ⁻¹ の転置にあたる。
    呼び出し側は常に左から u を掛けて u·ζ·ΔW = ⟨σ*(σσ*)⁻¹u, ΔW⟩ = ⟨σ⁻¹u, ΔW⟩ の形で使うので、
    重みは因子の順序によらない。対称な σ では σ(σσ*)⁻¹ とも一致する。

    Args:
        coeffs: 係数
        t: 時刻
        x: 形状 (..., d) の位置

    Returns:
        形状 (..., d, d) の配列

    Raises:
        SingularDiffusion: a=σσ* の条件数が 1e12 を超える場合
    """
    x = np.asarray(x, dtype=float)
    # 定数拡散は1点で計算してブロードキャスト
    point = x.reshape(-1, coeffs.dim)[:1] if coeffs.constant_diffusion else x
    sigma = np.asarray(coeffs.diffusion(t, point), dtype=float)
    a = sigma @ np.swapaxes(sigma, -1, -2)
    cond = np.linalg.cond(a)
    bad = ~np.isfinite(cond) | (cond > MAX_CONDITION_NUMBER)
    if np.any(bad):
        raise SingularDiffusion(float(np.max(np.where(np.isfinite(cond), cond, np.inf))))
    result = np.linalg.solve(a, sigma)
    if coeffs.constant_diffusion:
        return np.broadcast_to(result[0], x.shape[:-1] + (coeffs.dim, coeffs.dim))
    return result


def check_drift_jacobian(
    coeffs: CoefficientSet, n_points: int = 100, seed: int = 0, T: float = 1.0, eps: float = 1e-5
) -> float:
    """
    ドリフトの中心差分と drift_jacobian の最大相対誤差を返す

    ランダムに抽出した (t, x) で評価する。ドリフトが恒等的に0の場合は0を返す。
    """
    rng = np.random.default_rng(seed)
    d = coeffs.dim
    worst = 0.0
    for _ in range(n_points):
        t = float(rng.uniform(0.0, T))
        x = rng.standard_normal(d)
        jac = np.asarray(coeffs.drift_jacobian(t, x), dtype=float)
        fd = np.empty((d, d))
        for j in range(d):
            step = np.zeros(d)
            step[j] = eps
            fd[:, j] = (coeffs.drift(t, x + step) - coeffs.drift(t, x - step)) / (2 * eps)
        scale = max(float(np.linalg.norm(jac)), 1.0)
        worst = max(worst, float(np.linalg.norm(fd - jac)) / scale)
    return worst


# ---------------------------------------------------------------------------
# 仮定（H）と定理の条件
# ---------------------------------------------------------------------------


class AssumptionParams(BaseModel):
    """定理の条件に現れるパラメータ（k, k' には .inf を指定可能）"""

    model_config = ConfigDict(extra="forbid")

    d: int = Field(ge=1, description="次元")
    T: float = Field(gt=0, description="時間区間の終端")
    kappa: float = Field(description="時間指数 κ")
    beta: float = Field(default=0.0, description="空間特異性の指数 β")
    k: float = Field(default=math.inf, description="‖h_t‖ の可積分指数 k（∞=有界カーネル）")
    k_prime: float = Field(default=math.inf, description="‖∇h_t‖ の可積分指数 k'（∞=有界）")
    p: float = Field(default=2.0, description="モーメント指数 p")


@dataclass(frozen=True)
class AssumptionCheck:
    """1つの不等式の検証結果（margin > 0 なら成立）"""

    name: str
    passed: bool
    margin: float
    detail: str = ""


@dataclass(frozen=True)
class PInterval:
    """p の許容区間 [low, ∞) または (low, ∞)"""

    low: float
    low_inclusive: bool
    empty: bool = False

    def contains(self, p: float) -> bool:
        if self.empty:
            return False
        return p > self.low or (self.low_inclusive and p == self.low)

    def __str__(self) -> str:
        if self.empty:
            return "∅"
        bracket = "[" if self.low_inclusive else "("
        return f"{bracket}{self.low:g}, ∞)"


@dataclass
class ValidationReport:
    """validate_assumptions の結果"""

    checks: list[AssumptionCheck]
    p_interval: PInterval

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def failures(self) -> list[AssumptionCheck]:
        return [check for check in self.checks if not check.passed]


def admissible_p_interval(d: int, kappa: float, k_prime: float) -> PInterval:
    """
    p の許容区間 [2k'(κ+1)/(2k'(κ+1)-d), ∞) ∩ (k'/(k'-1), ∞) を返す

    k'=∞ の場合は極限 (1, ∞) を返す。
    """
    if math.isinf(k_prime):
        return PInterval(low=1.0, low_inclusive=False)
    denom = 2.0 * k_prime * (kappa + 1.0) - d
    if denom <= 0 or k_prime <= 1.0:
        return PInterval(low=math.inf, low_inclusive=False, empty=True)
    lower_closed = 2.0 * k_prime * (kappa + 1.0) / denom
    lower_open = k_prime / (k_prime - 1.0)
    if lower_closed > lower_open:
        return PInterval(low=lower_closed, low_inclusive=True)
    return PInterval(low=lower_open, low_inclusive=False)


def _strict(name: str, margin: float, detail: str = "") -> AssumptionCheck:
    return AssumptionCheck(name=name, passed=margin > 0, margin=margin, detail=detail)


def _skipped(name: str, detail: str) -> AssumptionCheck:
    return AssumptionCheck(name=name, passed=True, margin=math.inf, detail=detail)


def validate_assumptions(params: AssumptionParams, spec: KernelSpec) -> ValidationReport:
    """
    定理の条件とカーネル固有の範囲を検証する

    失敗は例外ではなくレポートの項目として返す。

    Args:
        params: 次元・指数などのパラメータ
        spec: カーネル設定

    Returns:
        各不等式の成否・余裕と、p の許容区間
    """
    d, kappa, k, kp, p = params.d, params.kappa, params.k, params.k_prime, params.p
    checks: list[AssumptionCheck] = []

    if math.isinf(k):
        checks.append(_skipped("k > d", "k=∞（有界カーネル）のため省略"))
    else:
        checks.append(_strict("k > d", k - d, f"k={k:g}, d={d}"))

    if math.isinf(kp):
        checks.append(_skipped("k' > 1", "k'=∞（有界な勾配）のため省略"))
    else:
        checks.append(_strict("k' > 1", kp - 1.0, f"k'={kp:g}"))

    lhs = 2.0 * kappa - (0.0 if math.isinf(kp) else d / kp)
    checks.append(_strict("2κ - d/k' > -1", lhs + 1.0, f"2κ - d/k' = {lhs:.6g}"))

    interval = admissible_p_interval(d, kappa, kp)
    checks.append(
        AssumptionCheck(
            name="p ∈ 許容区間",
            passed=interval.contains(p),
            margin=-math.inf if interval.empty else p - interval.low,
            detail=f"p={p:g}, 区間={interval}",
        )
    )

    if spec.kind == "zero":
        for name in ("κ > β/2", "k ∈ (d, d/β)", "k' ∈ (max(1, d/(2κ+1)), d/(β+1))"):
            checks.append(_skipped(name, "相互作用なし（自明に成立）"))
    elif spec.kind == "coulomb":
        beta = spec.beta
        checks.append(_strict("κ > β/2", kappa - beta / 2.0, f"κ={kappa:g}, β={beta:g}"))
        k_upper = d / beta if beta > 0 else math.inf
        if math.isinf(k) and math.isinf(k_upper):
            checks.append(_skipped("k ∈ (d, d/β)", "β=0, k=∞"))
        else:
            checks.append(
                _strict("k ∈ (d, d/β)", min(k - d, k_upper - k), f"k={k:g}, 上限={k_upper:g}")
            )
        kp_lower = max(1.0, d / (2.0 * kappa + 1.0))
        kp_upper = d / (beta + 1.0)
        checks.append(
            _strict(
                "k' ∈ (max(1, d/(2κ+1)), d/(β+1))",
                min(kp - kp_lower, kp_upper - kp),
                f"k'={kp:g}, 区間=({kp_lower:g}, {kp_upper:g})",
            )
        )

    return ValidationReport(checks=checks, p_interval=interval)
