"""
変分過程 v_t = ∇_η X_t と凍結フロー上のヤコビ行列 J_t
"""

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .ensemble import Ensemble, TimeGrid, map_particle_chunks, pair_chunk_rows
from .errors import NonFinite, OutOfRange
from .params import CoefficientSet, KernelSpec, kernel_grad, pair_differences

if TYPE_CHECKING:
    from .simulator import MeasureFlow, StepView

DirectionSource = Literal["constant", "map_of_initial"]


class PhiSpec(BaseModel):
    """初期摂動の方向 η = φ(X₀)"""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["constant", "affine"] = Field(
        default="constant", description="constant: φ≡c, affine: φ(x)=A x + c"
    )
    vector: list[float] | None = Field(
        default=None, description="定数項 c（長さ1または d。省略時は全成分1）"
    )
    matrix: list[list[float]] | None = Field(default=None, description="affine の行列 A（d×d）")

    @property
    def source(self) -> DirectionSource:
        return "constant" if self.kind == "constant" else "map_of_initial"

    def apply(self, x: np.ndarray) -> np.ndarray:
        """φ を形状 (N, d) の初期位置に適用する"""
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        offset = np.ones(d) if self.vector is None else np.asarray(self.vector, dtype=float)
        if offset.shape == (1,):
            offset = np.full(d, offset[0])
        if offset.shape != (d,):
            raise OutOfRange(f"phi.vector の長さが次元 d={d} と一致しません")
        if self.kind == "constant":
            return np.broadcast_to(offset, x.shape).copy()
        if self.matrix is None:
            raise OutOfRange("phi.kind=affine には phi.matrix が必要です")
        matrix = np.asarray(self.matrix, dtype=float)
        if matrix.shape != (d, d):
            raise OutOfRange(f"phi.matrix の形状が ({d}, {d}) ではありません")
        return x @ matrix.T + offset

    def scaled(self, factor: float) -> "PhiSpec":
        """方向を factor 倍した PhiSpec"""
        vector = [factor] if self.vector is None else [factor * c for c in self.vector]
        matrix = None if self.matrix is None else [[factor * a for a in row] for row in self.matrix]
        return PhiSpec(kind=self.kind, vector=vector, matrix=matrix)


@dataclass
class VariationState:
    """粒子ごとの変分ベクトル v^i（形状 (N, d)）"""

    vectors: np.ndarray
    source: DirectionSource = "constant"


@dataclass
class JacobianState:
    """分離SDEのヤコビ行列 J^i（形状 (N, d, d)）"""

    matrices: np.ndarray

    @classmethod
    def identity(cls, n: int, dim: int) -> "JacobianState":
        return cls(np.tile(np.eye(dim), (n, 1, 1)))


# ---------------------------------------------------------------------------
# 相互作用項の線形化
# ---------------------------------------------------------------------------


def interaction_linearization(
    kernel: KernelSpec,
    t: float,
    x: np.ndarray,
    v: np.ndarray,
    *,
    with_measure_term: bool = False,
) -> tuple[np.ndarray, np.ndarray | None]:
    """
    N粒子系の相互作用ドリフトを v 方向に線形化する

    Returns:
        (lin, measure):
        lin^i = (1/(N-1)) Σ_{j≠i} ∇h_t(X^i - X^j)(v^i - v^j)、
        measure^i = -(1/(N-1)) Σ_{j≠i} ∇h_t(X^i - X^j) v^j（with_measure_term の場合のみ）
    """
    n, d = x.shape
    if kernel.kind == "zero" or n < 2:
        return np.zeros_like(x), (np.zeros_like(x) if with_measure_term else None)
    norm = 1.0 / (n - 1)

    def chunk(rows: slice) -> tuple[np.ndarray, ...]:
        diffs, diagonal = pair_differences(x, x, rows, exclude_self=True)
        grad = kernel_grad(kernel, t, diffs)
        grad[diagonal] = 0.0
        # v^i - v^j を先に作り、定数方向では厳密に0になるようにする
        dv = v[rows, None, :] - v[None, :, :]
        lin = np.einsum("cnij,cnj->ci", grad, dv) * norm
        if not with_measure_term:
            return (lin,)
        measure = -np.einsum("cnij,nj->ci", grad, v) * norm
        return lin, measure

    parts = map_particle_chunks(chunk, n, chunk=pair_chunk_rows(n, d))
    return parts[0], (parts[1] if with_measure_term else None)


def frozen_gradient(
    kernel: KernelSpec, t: float, x: np.ndarray, y: np.ndarray, *, exclude_self: bool = False
) -> np.ndarray | None:
    """
    凍結フロー y に対する相互作用ドリフトの x 勾配 (1/N) Σ_j ∇h_t(x^i - y^j)

    相互作用がない場合は None を返す。
    """
    n_x, d = x.shape
    n_y = y.shape[0]
    if kernel.kind == "zero" or (exclude_self and n_y < 2):
        return None
    if exclude_self and n_x != n_y:
        raise OutOfRange("exclude_self には粒子数が一致するフローが必要です")
    norm = 1.0 / (n_y - 1 if exclude_self else n_y)

    def chunk(rows: slice) -> np.ndarray:
        diffs, diagonal = pair_differences(x, y, rows, exclude_self)
        grad = kernel_grad(kernel, t, diffs)
        if diagonal is not None:
            grad[diagonal] = 0.0
        return grad.sum(axis=1) * norm

    return map_particle_chunks(chunk, n_x, chunk=pair_chunk_rows(n_y, d))


def advance_variation(
    coeffs: CoefficientSet,
    t: float,
    dt: float,
    x: np.ndarray,
    v: np.ndarray,
    dw: np.ndarray,
    lin: np.ndarray,
) -> np.ndarray:
    """v ← v + [∇b v + lin] Δt + (∇_v σ) ΔW"""
    drift = np.einsum("nij,nj->ni", coeffs.drift_jacobian(t, x), v) + lin
    noise = np.einsum("nij,nj->ni", coeffs.diffusion_jacobian(t, x, v), dw)
    return v + drift * dt + noise


def advance_jacobian(
    coeffs: CoefficientSet,
    t: float,
    dt: float,
    x: np.ndarray,
    jac: np.ndarray,
    dw: np.ndarray,
    interaction_grad: np.ndarray | None,
) -> np.ndarray:
    """J ← J + [∇b + (1/N)Σ∇h] J Δt + 列ごとの (∇_{J e_k} σ) ΔW"""
    grad = np.asarray(coeffs.drift_jacobian(t, x), dtype=float)
    if interaction_grad is not None:
        grad = grad + interaction_grad
    noise = np.stack(
        [
            np.einsum("nij,nj->ni", coeffs.diffusion_jacobian(t, x, jac[:, :, k]), dw)
            for k in range(jac.shape[-1])
        ],
        axis=-1,
    )
    return jac + (grad @ jac) * dt + noise


def step_variation(
    ensemble: Ensemble,
    variation: VariationState,
    coeffs: CoefficientSet,
    kernel: KernelSpec,
    grid: TimeGrid,
    m: int,
) -> VariationState:
    """
    変分を1ステップ進める（位置は更新しない）

    位置・変分はステップ m の値を使い、増分はアンサンブルと同じ ΔW^i_m を使う。

    Raises:
        NonFinite: 更新後の変分に NaN/Inf が含まれる場合
    """
    t = float(grid.nodes[m])
    dt = grid.dt(m)
    x = ensemble.positions
    lin, _ = interaction_linearization(kernel, grid.kernel_time(m), x, variation.vectors)
    vectors = advance_variation(coeffs, t, dt, x, variation.vectors, ensemble.increments(m, dt), lin)
    if not np.all(np.isfinite(vectors)):
        raise NonFinite("variations", step_index=m + 1)
    return VariationState(vectors=vectors, source=variation.source)


def step_jacobian(
    decoupled_ensemble: Ensemble,
    jac: JacobianState,
    flow: "MeasureFlow",
    coeffs: CoefficientSet,
    kernel: KernelSpec,
    grid: TimeGrid,
    m: int,
    *,
    exclude_self: bool = False,
) -> JacobianState:
    """
    分離SDEのヤコビ行列を1ステップ進める

    測度は凍結されているため、相互作用は x 勾配のみが現れる。
    """
    t = float(grid.nodes[m])
    dt = grid.dt(m)
    x = decoupled_ensemble.positions
    interaction = frozen_gradient(
        kernel, grid.kernel_time(m), x, flow.snapshots[m], exclude_self=exclude_self
    )
    matrices = advance_jacobian(
        coeffs, t, dt, x, jac.matrices, decoupled_ensemble.increments(m, dt), interaction
    )
    if not np.all(np.isfinite(matrices)):
        raise NonFinite("jacobians", step_index=m + 1)
    return JacobianState(matrices=matrices)


# ---------------------------------------------------------------------------
# モーメント
# ---------------------------------------------------------------------------


@dataclass
class VariationHistory:
    """各節点での |v^i| を記録するオブザーバ"""

    times: list[float] = field(default_factory=list)
    norms: list[np.ndarray] = field(default_factory=list)

    def observe(self, view: "StepView") -> None:
        if view.variations is not None:
            self.times.append(view.t)
            self.norms.append(np.linalg.norm(view.variations, axis=-1))

    def finalize(self, ensemble: Ensemble, t: float) -> None:
        if ensemble.variations is not None:
            self.times.append(t)
            self.norms.append(np.linalg.norm(ensemble.variations, axis=-1))


@dataclass
class MomentReport:
    """t ↦ mean |v_t|^p と初期値に対する比"""

    p: float
    times: np.ndarray
    values: np.ndarray
    ratios: np.ndarray
    bound_factor: float

    @property
    def sup_ratio(self) -> float:
        return float(np.max(self.ratios)) if len(self.ratios) else 0.0

    @property
    def within_bound(self) -> bool:
        return bool(np.isfinite(self.sup_ratio)) and self.sup_ratio <= self.bound_factor

    def rows(self) -> list[tuple[float, float, float]]:
        return [
            (float(t), float(v), float(r))
            for t, v, r in zip(self.times, self.values, self.ratios, strict=True)
        ]


def moment_probe(history: VariationHistory, p: float, bound_factor: float = 100.0) -> MomentReport:
    """
    変分の p 次モーメントの時間推移を集計する

    mean |v₀|^p = 0 の場合、比は0と定義する。
    """
    if not p > 0:
        raise OutOfRange(f"p は正である必要があります: p={p}")
    if not history.norms:
        raise OutOfRange("変分の記録がありません")
    values = np.array([float(np.mean(norms**p)) for norms in history.norms])
    initial = values[0]
    ratios = values / initial if initial > 0 else np.zeros_like(values)
    return MomentReport(
        p=float(p),
        times=np.asarray(history.times, dtype=float),
        values=values,
        ratios=ratios,
        bound_factor=float(bound_factor),
    )
