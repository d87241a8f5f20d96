"""
成果物CSVの書き出しと粒子位置CSVの読み込み

すべてのCSVは1行目に "# digest=<hex>" を持ち、浮動小数点数は往復可能な最短表現で書く。
同じ設定・同じ seed ならバイト単位で同じファイルになる。
"""

import csv
import io
import math
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np

from .ensemble import TimeGrid
from .simulator import MeasureFlow

DIGEST_PREFIX = "# digest="


class PositionsCSVError(ValueError):
    """位置CSVの検証エラー"""

    def __init__(self, row_number: int, field: str, message: str):
        self.row_number = row_number
        self.field = field
        self.message = message
        super().__init__(f"行 {row_number}, フィールド '{field}': {message}")


def format_value(value: object) -> str:
    """CSVのセル表現（float は repr による最短の往復表現）"""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


def write_csv(
    path: str | Path, header: Sequence[str], rows: Iterable[Sequence[object]], digest: str
) -> Path:
    """ダイジェスト行・ヘッダー行・データ行を書き出す"""
    output = Path(path)
    output.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.StringIO()
    buffer.write(f"{DIGEST_PREFIX}{digest}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(value) for value in row])
    output.write_text(buffer.getvalue(), encoding="utf-8")
    return output


def positions_header(dim: int) -> list[str]:
    return ["particle", *[f"x_{k}" for k in range(1, dim + 1)]]


def write_positions_csv(path: str | Path, positions: np.ndarray, digest: str) -> Path:
    """粒子位置を particle, x_1..x_d の列で書き出す"""
    rows = ([i, *row] for i, row in enumerate(positions.tolist()))
    return write_csv(path, positions_header(positions.shape[1]), rows, digest)


def write_flow(directory: str | Path, flow: MeasureFlow, digest: str) -> list[Path]:
    """測度フローを節点ごとに flow_<step>.csv として書き出す"""
    directory = Path(directory)
    return [
        write_positions_csv(directory / f"flow_{m}.csv", snapshot, digest)
        for m, snapshot in enumerate(flow.snapshots)
    ]


def read_digest(path: str | Path) -> str | None:
    with open(path, encoding="utf-8") as f:
        first = f.readline().rstrip("\n")
    return first[len(DIGEST_PREFIX) :] if first.startswith(DIGEST_PREFIX) else None


def _parse_rows(reader: csv.DictReader, dim: int) -> tuple[list[list[float]], list[tuple[int, str, str]]]:
    rows: list[list[float]] = []
    errors: list[tuple[int, str, str]] = []
    # 1行目はダイジェスト、2行目はヘッダー
    for row_number, row in enumerate(reader, start=3):
        particle = (row.get("particle") or "").strip()
        if particle != str(len(rows) + len(errors)):
            errors.append((row_number, "particle", f"粒子番号が連番ではありません: '{particle}'"))
            continue
        values = []
        for k in range(1, dim + 1):
            name = f"x_{k}"
            text = (row.get(name) or "").strip()
            try:
                value = float(text)
            except ValueError:
                errors.append((row_number, name, f"数値ではありません: '{text}'"))
                break
            if not math.isfinite(value):
                errors.append((row_number, name, f"有限値ではありません: '{text}'"))
                break
            values.append(value)
        else:
            rows.append(values)
    return rows, errors


def read_positions_csv(path: str | Path) -> tuple[np.ndarray, str | None]:
    """
    粒子位置CSVを読み込む

    Returns:
        (形状 (N, d) の配列, ダイジェスト)

    Raises:
        FileNotFoundError: ファイルが見つからない場合
        PositionsCSVError: 1件のみの行エラー
        ValueError: ヘッダーの不備、複数の行エラー、データなし
    """
    csv_file = Path(path)
    if not csv_file.exists():
        raise FileNotFoundError(f"CSVファイルが見つかりません: {path}")

    digest = read_digest(csv_file)
    with open(csv_file, encoding="utf-8") as f:
        if digest is not None:
            f.readline()
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ValueError("CSVファイルにヘッダー行がありません")
        coordinates = [name for name in reader.fieldnames if name.startswith("x_")]
        dim = len(coordinates)
        if dim == 0 or list(reader.fieldnames) != positions_header(dim):
            raise ValueError(
                f"ヘッダーは particle, x_1..x_d である必要があります: {', '.join(reader.fieldnames)}"
            )
        rows, errors = _parse_rows(reader, dim)

    if len(errors) == 1:
        raise PositionsCSVError(*errors[0])
    if errors:
        messages = "\n".join(f"  行 {row}: [{name}] {msg}" for row, name, msg in errors)
        raise ValueError(f"CSVファイルに {len(errors)} 件のエラーがあります:\n{messages}")
    if not rows:
        raise ValueError("CSVファイルに有効なデータがありません")
    return np.asarray(rows, dtype=float), digest


def read_flow(directory: str | Path, grid: TimeGrid) -> MeasureFlow:
    """flow_<step>.csv 群から MeasureFlow を復元する"""
    directory = Path(directory)
    snapshots = [read_positions_csv(directory / f"flow_{m}.csv")[0] for m in range(grid.M + 1)]
    return MeasureFlow(grid=grid, snapshots=snapshots)


def write_failures(path: str | Path, failures: Sequence[tuple[str, str]], digest: str) -> Path:
    """失敗したアサーションを check, detail の列で書き出す"""
    return write_csv(path, ["check", "detail"], failures, digest)
