"""
粒子系の状態・時間グリッド・カウンタベース乱数ストリーム

ブラウン増分は (seed, particle, step) のみから決まる。並列実行の
スケジュールやワーカー数に関係なく同じ結果を再現する。
"""

import os
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import InvalidGrid, InvalidLaw, NonFinite, OutOfRange

GridKind = Literal["uniform", "graded"]
LawKind = Literal["dirac", "gaussian", "uniform_box", "two_point"]

# ワーカー数の上限を指定する環境変数（結果には影響しない）
THREADS_ENV = "MFB_THREADS"
# 粒子チャンクの大きさ。ワーカー数に依存させない
DEFAULT_CHUNK = 256

# ペア評価1チャンクあたりの要素数の上限（d×d 行列を含む）
PAIR_BUDGET = 1 << 21

# 初期サンプリングに使うストリームのステップ番号
INITIAL_STEP = -1


# ---------------------------------------------------------------------------
# 時間グリッド
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """[0, T] の分割。graded の場合 t_m = T (m/M)^γ"""

    T: float
    M: int
    nodes: np.ndarray
    kind: GridKind = "uniform"
    gamma: float = 1.0

    def dt(self, m: int) -> float:
        return float(self.nodes[m + 1] - self.nodes[m])

    def kernel_time(self, m: int) -> float:
        """カーネルの時間因子 t^κ に使う時刻（m=0 では t_1 を使う）"""
        return float(self.nodes[1] if m == 0 else self.nodes[m])

    def same_as(self, other: "TimeGrid") -> bool:
        return self.M == other.M and bool(np.array_equal(self.nodes, other.nodes))


def make_grid(T: float, M: int, kind: GridKind = "uniform", gamma: float = 1.0) -> TimeGrid:
    """
    時間グリッドを作成する

    Raises:
        InvalidGrid: T ≤ 0, M < 1, γ < 1, uniform で γ ≠ 1、または節点が狭義単調増加でない場合
    """
    if not (np.isfinite(T) and T > 0):
        raise InvalidGrid(f"T は正の有限値である必要があります: T={T}")
    if int(M) != M or M < 1:
        raise InvalidGrid(f"ステップ数 M は1以上の整数である必要があります: M={M}")
    if kind not in ("uniform", "graded"):
        raise InvalidGrid(f"未知のグリッド種別です: {kind}")
    if not gamma >= 1.0:
        raise InvalidGrid(f"γ は1以上である必要があります: γ={gamma}")
    if kind == "uniform" and gamma != 1.0:
        raise InvalidGrid("uniform グリッドでは γ=1 である必要があります")

    M = int(M)
    # uniform も同じ式で計算し、γ=1 の graded と完全に一致させる
    nodes = T * (np.arange(M + 1) / M) ** float(gamma)
    nodes[-1] = T
    if not np.all(np.diff(nodes) > 0):
        raise InvalidGrid("節点が狭義単調増加になりません（M または γ が大きすぎます）")
    return TimeGrid(T=float(T), M=M, nodes=nodes, kind=kind, gamma=float(gamma))


# ---------------------------------------------------------------------------
# 乱数ストリーム
# ---------------------------------------------------------------------------


def _stream(seed: int, step: int) -> np.random.Generator:
    """(seed, step) をキーとする Philox ストリーム。粒子 i は先頭から i 行目を使う"""
    if seed < 0:
        raise OutOfRange(f"seed は非負整数である必要があります: {seed}")
    sequence = np.random.SeedSequence(int(seed), spawn_key=(int(step) - INITIAL_STEP,))
    return np.random.Generator(np.random.Philox(sequence))


def derive_seed(seed: int, tag: int) -> int:
    """独立なアンサンブル用に seed から別の64ビット seed を導出する"""
    sequence = np.random.SeedSequence(int(seed), spawn_key=(0, int(tag)))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def brownian_increments(seed: int, step: int, dt: float, n_streams: int, dim: int) -> np.ndarray:
    """
    ステップ step のブラウン増分を n_streams 本まとめて生成する

    行 i は (seed, i, step) のみで決まる（生成本数によらず先頭から同じ値が並ぶ）。

    Returns:
        形状 (n_streams, dim)、平均0・共分散 dt·I の配列
    """
    if not dt > 0:
        raise OutOfRange(f"dt は正である必要があります: dt={dt}")
    return np.sqrt(dt) * _stream(seed, step).standard_normal((n_streams, dim))


def brownian_increment(seed: int, particle: int, step: int, dt: float, dim: int) -> np.ndarray:
    """粒子 particle のステップ step の増分（d次元ベクトル）"""
    return brownian_increments(seed, step, dt, particle + 1, dim)[particle]


# ---------------------------------------------------------------------------
# 初期分布
# ---------------------------------------------------------------------------


class InitialLaw(BaseModel):
    """初期分布 μ = L(X₀)"""

    model_config = ConfigDict(extra="forbid")

    kind: LawKind = Field(default="dirac", description="分布の種類")
    location: list[float] | None = Field(
        default=None, description="dirac の位置 / gaussian の平均（省略時は原点）"
    )
    scale: float = Field(default=1.0, description="gaussian の共分散スケール（共分散 = scale·I）")
    low: list[float] | None = Field(default=None, description="uniform_box の下限")
    high: list[float] | None = Field(default=None, description="uniform_box の上限")
    points: list[list[float]] | None = Field(default=None, description="two_point の2点")
    weight: float = Field(default=0.5, description="two_point で1点目を選ぶ確率")


def _law_vector(value: list[float] | None, dim: int, name: str) -> np.ndarray:
    if value is None:
        return np.zeros(dim)
    arr = np.asarray(value, dtype=float)
    if arr.shape != (dim,):
        raise InvalidLaw(f"{name} の長さが次元 d={dim} と一致しません")
    if not np.all(np.isfinite(arr)):
        raise InvalidLaw(f"{name} に非有限値が含まれています")
    return arr


def check_law(law: InitialLaw, dim: int) -> None:
    """
    初期分布のパラメータを検証する

    Raises:
        InvalidLaw: パラメータが確率分布を定義しない場合
    """
    if law.kind in ("dirac", "gaussian"):
        _law_vector(law.location, dim, "location")
    if law.kind == "gaussian" and not (np.isfinite(law.scale) and law.scale >= 0):
        raise InvalidLaw(f"gaussian の scale は非負である必要があります: {law.scale}")
    if law.kind == "uniform_box":
        if law.low is None or law.high is None:
            raise InvalidLaw("uniform_box には low と high が必要です")
        low = _law_vector(law.low, dim, "low")
        high = _law_vector(law.high, dim, "high")
        if not np.all(low < high):
            raise InvalidLaw("uniform_box は low < high（成分ごと）である必要があります")
    if law.kind == "two_point":
        if law.points is None or len(law.points) != 2:
            raise InvalidLaw("two_point には2点 points が必要です")
        for i, point in enumerate(law.points):
            _law_vector(point, dim, f"points[{i}]")
        if not 0.0 <= law.weight <= 1.0:
            raise InvalidLaw(f"two_point の weight は [0, 1] にある必要があります: {law.weight}")


def sample_law(law: InitialLaw, dim: int, seed: int, stream_ids: np.ndarray) -> np.ndarray:
    """ストリーム (seed, particle, step=-1) から初期位置をサンプリングする"""
    check_law(law, dim)
    n_rows = int(stream_ids.max()) + 1
    if law.kind == "dirac":
        return np.tile(_law_vector(law.location, dim, "location"), (len(stream_ids), 1))
    rng = _stream(seed, INITIAL_STEP)
    if law.kind == "gaussian":
        mean = _law_vector(law.location, dim, "location")
        rows = mean + np.sqrt(law.scale) * rng.standard_normal((n_rows, dim))
    elif law.kind == "uniform_box":
        low = _law_vector(law.low, dim, "low")
        high = _law_vector(law.high, dim, "high")
        rows = low + (high - low) * rng.random((n_rows, dim))
    else:
        first, second = (np.asarray(point, dtype=float) for point in law.points or [])
        pick_first = rng.random(n_rows) < law.weight
        rows = np.where(pick_first[:, None], first, second)
    return rows[stream_ids]


# ---------------------------------------------------------------------------
# アンサンブル
# ---------------------------------------------------------------------------


@dataclass
class Ensemble:
    """
    N粒子系の状態

    positions は X^i、variations は変分 v^i、jacobians は J^i を保持する。
    brownian_log は増分を保持する場合のみリスト（保持しない場合は None）。
    """

    positions: np.ndarray
    seed: int
    stream_ids: np.ndarray
    step_index: int = 0
    variations: np.ndarray | None = None
    jacobians: np.ndarray | None = None
    brownian_log: list[np.ndarray] | None = None
    _pending: tuple[int, np.ndarray] | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return int(self.positions.shape[0])

    @property
    def dim(self) -> int:
        return int(self.positions.shape[1])

    def increments(self, m: int, dt: float) -> np.ndarray:
        """ステップ m の増分 ΔW^i を返す（同じステップでは同じ配列を返す）"""
        if self.brownian_log is not None and m < len(self.brownian_log):
            return self.brownian_log[m]
        if self._pending is not None and self._pending[0] == m:
            return self._pending[1]
        n_streams = int(self.stream_ids.max()) + 1
        dw = brownian_increments(self.seed, m, dt, n_streams, self.dim)
        if n_streams != self.N or not np.array_equal(self.stream_ids, np.arange(self.N)):
            dw = dw[self.stream_ids]
        if self.brownian_log is not None:
            self.brownian_log.append(dw)
        else:
            self._pending = (m, dw)
        return dw

    def check_finite(self, step: int) -> None:
        for name in ("positions", "variations", "jacobians"):
            values = getattr(self, name)
            if values is not None and not np.all(np.isfinite(values)):
                raise NonFinite(name, step_index=step)


def init_ensemble(
    law: InitialLaw,
    N: int,
    dim: int,
    seed: int,
    *,
    positions: np.ndarray | None = None,
    stream_ids: np.ndarray | None = None,
    variations: np.ndarray | None = None,
    with_jacobians: bool = False,
    retain_increments: bool = False,
) -> Ensemble:
    """
    初期分布から N 粒子のアンサンブルを作成する

    Args:
        law: 初期分布
        N: 粒子数
        dim: 次元
        seed: 64ビット seed
        positions: 指定した場合はサンプリングせずにこの初期位置を使う
        stream_ids: 粒子 i が使う乱数ストリーム番号（省略時は i）
        variations: 変分の初期値 v^i = φ(X₀^i)
        with_jacobians: J^i を単位行列で初期化する
        retain_increments: ブラウン増分を brownian_log に保持する

    Raises:
        InvalidLaw: 分布パラメータが不正な場合
    """
    if N < 1:
        raise OutOfRange(f"粒子数 N は1以上である必要があります: N={N}")
    ids = np.arange(N) if stream_ids is None else np.asarray(stream_ids, dtype=np.int64)
    if ids.shape != (N,) or np.any(ids < 0):
        raise OutOfRange("stream_ids は長さ N の非負整数配列である必要があります")
    if positions is None:
        x0 = sample_law(law, dim, seed, ids)
    else:
        x0 = np.array(positions, dtype=float, copy=True)
        if x0.shape != (N, dim):
            raise OutOfRange(f"初期位置の形状が ({N}, {dim}) ではありません: {x0.shape}")
    ensemble = Ensemble(
        positions=x0,
        seed=int(seed),
        stream_ids=ids,
        variations=None if variations is None else np.array(variations, dtype=float),
        jacobians=np.tile(np.eye(dim), (N, 1, 1)) if with_jacobians else None,
        brownian_log=[] if retain_increments else None,
    )
    ensemble.check_finite(0)
    return ensemble


# ---------------------------------------------------------------------------
# 並列実行
# ---------------------------------------------------------------------------


def worker_count() -> int:
    """MFB_THREADS（未設定ならCPU数）からワーカー数を決める"""
    value = os.environ.get(THREADS_ENV)
    if value:
        try:
            count = int(value)
        except ValueError as e:
            raise ValueError(f"{THREADS_ENV} は正の整数である必要があります: {value}") from e
        if count < 1:
            raise ValueError(f"{THREADS_ENV} は正の整数である必要があります: {value}")
        return count
    return os.cpu_count() or 1


def pair_chunk_rows(n_columns: int, dim: int) -> int:
    """ペア評価のチャンク行数（N と d のみで決まる）"""
    return max(1, min(DEFAULT_CHUNK, PAIR_BUDGET // max(1, n_columns * dim * dim)))


def map_particle_chunks(
    fn: Callable[[slice], Any], n: int, chunk: int = DEFAULT_CHUNK, workers: int | None = None
) -> Any:
    """
    粒子インデックスを固定サイズのチャンクに分け、fn を並列に評価して連結する

    fn は配列または配列のタプルを返す。チャンク境界はワーカー数に依存しないため、
    結果はワーカー数によらずビット単位で一致する。
    """
    slices = [slice(start, min(start + chunk, n)) for start in range(0, n, chunk)]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(slices) <= 1:
        parts = [fn(s) for s in slices]
    else:
        with ThreadPoolExecutor(max_workers=min(workers, len(slices))) as executor:
            parts = list(executor.map(fn, slices))
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate(group, axis=0) for group in zip(*parts, strict=True))
    return np.concatenate(parts, axis=0)
