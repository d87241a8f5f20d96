"""
RunConfig から実行に必要なオブジェクト一式を組み立てる
"""

import dataclasses
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal

import numpy as np

from .bismut import BetaKind
from .ensemble import GridKind, InitialLaw, TimeGrid, make_grid
from .params import CoefficientSet, KernelSpec, build_coefficients, resolve_kernel
from .simulator import TestFunction
from .variation import PhiSpec

if TYPE_CHECKING:
    from .config import RunConfig


@dataclass(frozen=True, eq=False)
class ExperimentSetup:
    """1回の実行で共有する初期分布・係数・カーネル・グリッドなど"""

    law: InitialLaw
    coeffs: CoefficientSet
    kernel: KernelSpec
    grid: TimeGrid
    N: int
    seed: int
    f: TestFunction
    phi: PhiSpec
    beta: BetaKind = "linear"
    ensemble_mode: Literal["single", "two"] = "single"
    p: float = 2.0
    k: float = math.inf
    k_prime: float = math.inf
    stream_ids: np.ndarray | None = None
    config_digest: str = ""

    @property
    def dim(self) -> int:
        return self.coeffs.dim

    @property
    def T(self) -> float:
        return self.grid.T

    def replace(self, **changes) -> "ExperimentSetup":
        return dataclasses.replace(self, **changes)


def choose_grid_kind(kernel: KernelSpec, k: float) -> GridKind:
    """κ>0 または k<∞（t→0 で特異なドリフト上界）のとき graded、それ以外は uniform"""
    return "graded" if kernel.kappa > 0 or math.isfinite(k) else "uniform"


def build_setup(config: "RunConfig", seed: int | None = None) -> ExperimentSetup:
    """
    設定から ExperimentSetup を作成する

    Args:
        config: 検証済みの実行設定
        seed: 指定した場合は sim.seed を上書きする
    """
    d = config.model.d
    sim = config.sim
    kernel = resolve_kernel(config.kernel, sim.N, d, sim.delta_factor)
    kind = choose_grid_kind(kernel, config.oracle.k) if sim.grid == "auto" else sim.grid
    grid = make_grid(config.model.T, sim.M, kind, sim.gamma if kind == "graded" else 1.0)
    return ExperimentSetup(
        law=config.initial,
        coeffs=build_coefficients(config.drift, config.diffusion, d),
        kernel=kernel,
        grid=grid,
        N=sim.N,
        seed=sim.seed if seed is None else seed,
        f=config.estimator.test_function,
        phi=config.estimator.phi,
        beta=config.estimator.beta,
        ensemble_mode=config.estimator.ensemble_mode,
        p=config.oracle.p,
        k=config.oracle.k,
        k_prime=config.oracle.k_prime,
        config_digest=config.digest(),
    )
