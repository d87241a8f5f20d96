"""
テスト共通のフィクスチャ

小さな粒子数・ステップ数の実験設定を組み立てるヘルパーを提供する。
"""

import math
from pathlib import Path

import pytest

from mfbismut.ensemble import InitialLaw, make_grid
from mfbismut.experiment import ExperimentSetup
from mfbismut.params import DiffusionSpec, DriftSpec, KernelSpec, build_coefficients
from mfbismut.simulator import TestFunction
from mfbismut.variation import PhiSpec

PROJECT_ROOT = Path(__file__).parent.parent


def make_setup(
    *,
    d: int = 1,
    T: float = 1.0,
    N: int = 200,
    M: int = 20,
    seed: int = 1,
    kernel: KernelSpec | None = None,
    drift: DriftSpec | None = None,
    diffusion: DiffusionSpec | None = None,
    law: InitialLaw | None = None,
    f: TestFunction | None = None,
    phi: PhiSpec | None = None,
    grid_kind: str = "uniform",
    gamma: float = 1.0,
    **extra,
) -> ExperimentSetup:
    """テスト用の ExperimentSetup を作る（既定は相互作用なしの1次元ブラウン運動）"""
    kernel = kernel if kernel is not None else KernelSpec(kind="zero", delta=0.0)
    return ExperimentSetup(
        law=law if law is not None else InitialLaw(kind="dirac", location=[0.0] * d),
        coeffs=build_coefficients(drift or DriftSpec(), diffusion or DiffusionSpec(), d),
        kernel=kernel,
        grid=make_grid(T, M, grid_kind, gamma),
        N=N,
        seed=seed,
        f=f if f is not None else TestFunction(kind="sine"),
        phi=phi if phi is not None else PhiSpec(),
        **extra,
    )


@pytest.fixture
def gaussian_kernel() -> KernelSpec:
    """有界なガウス型カーネル（c=0.5, κ=0）"""
    return KernelSpec(kind="gaussian_linear", amplitude=0.5, kappa=0.0, delta=0.0)


@pytest.fixture
def bench_setup(gaussian_kernel) -> ExperimentSetup:
    """ガウス型カーネルの基準ケースを縮小した設定"""
    return make_setup(
        T=0.5,
        N=400,
        M=40,
        seed=11,
        kernel=gaussian_kernel,
        law=InitialLaw(kind="dirac", location=[0.5]),
    )


@pytest.fixture
def heat_value() -> float:
    """D_1 P_1 sin(δ₀) = e^(-1/2)"""
    return math.exp(-0.5)


@pytest.fixture
def setup_factory():
    """make_setup をテストから使うためのフィクスチャ"""
    return make_setup


@pytest.fixture
def project_root() -> Path:
    return PROJECT_ROOT
