import csv
import difflib
import hashlib
import json
from dataclasses import fields, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence

import numpy as np


def plain_data(value: Any) -> Any:
    """
    Convert dataclasses, enums, tuples and numpy scalars into the dicts, lists, strings and
    numbers that JSON and YAML can hold, recursively
    """
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: plain_data(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(key): plain_data(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain_data(item) for item in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def canonical_json(value: Any) -> str:
    return json.dumps(plain_data(value), sort_keys=True, separators=(",", ":"))


def fingerprint(value: Any) -> str:
    "sha256 of the canonical JSON form of value"
    return hashlib.sha256(canonical_json(value).encode("utf-8")).hexdigest()


def arrays_sha256(arrays: dict) -> str:
    "Hash of named arrays, independent of dict order"
    digest = hashlib.sha256()
    for name in sorted(arrays):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return digest.hexdigest()


def closest_match(word: str, options: Iterable[str]) -> Optional[str]:
    matches = difflib.get_close_matches(word, list(options), n=1, cutoff=0.5)
    return matches[0] if matches else None


def did_you_mean(word: str, options: Iterable[str]) -> str:
    "' (did you mean X?)' when some option is close to word, else ''"
    suggestion = closest_match(word, options)
    return f" (did you mean {suggestion}?)" if suggestion is not None else ""


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    "Write a comma-separated table; floats are written with repr so they read back exactly"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return path


def read_csv(path: Path) -> List[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def append_jsonl(path: Path, record: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps(plain_data(record), sort_keys=True) + "\n")


def read_jsonl(path: Path) -> List[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
