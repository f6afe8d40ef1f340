from __future__ import annotations

import hashlib
import json
from datetime import UTC, datetime
from pathlib import Path
from typing import TYPE_CHECKING, Any

from loguru import logger

from causal_attention_tuning.settings import ConfigurationError, config_hash

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping


def record_id(question: str, answer: str) -> str:
    """Stable id for a dataset record, derived from its content.

    Returns:
        str: 16 hex characters.
    """
    return hashlib.sha256(f"{question}\n{answer}".encode()).hexdigest()[:16]


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    """Read a JSONL file, skipping blank lines.

    Args:
        path: The file to read.

    Returns:
        list[dict[str, Any]]: One dict per line.

    Raises:
        ConfigurationError: If the file is missing or a line is not a JSON object.
    """
    if not path.is_file():
        msg: str = f"Dataset not found: {path}"
        raise ConfigurationError(msg)

    records: list[dict[str, Any]] = []
    with Path.open(path, encoding="utf-8") as file:
        for line_number, line in enumerate(file, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                msg = f"{path}:{line_number} is not valid JSON"
                raise ConfigurationError(msg) from e
            if not isinstance(record, dict):
                msg = f"{path}:{line_number} is not a JSON object"
                raise ConfigurationError(msg)
            records.append(record)
    return records


def dump_record(record: Mapping[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False)


def write_jsonl(path: Path, records: Iterable[Mapping[str, Any]]) -> int:
    """Write records as JSONL, replacing the file.

    Returns:
        int: Number of records written.
    """
    count = 0
    with Path.open(path, "w", encoding="utf-8") as file:
        for record in records:
            file.write(dump_record(record) + "\n")
            count += 1
    logger.bind(stage="io").debug(f"Wrote {count} records to {path}")
    return count


def append_jsonl(path: Path, record: Mapping[str, Any]) -> None:
    with Path.open(path, "a", encoding="utf-8") as file:
        file.write(dump_record(record) + "\n")


def annotated_ids(output: Path) -> set[str]:
    """Get the ids of records that already have a causal map in the output file.

    Args:
        output: The annotated JSONL file.

    Returns:
        set[str]: Ids we can skip on a rerun.
    """
    if not output.is_file():
        return set()

    done: set[str] = set()
    with Path.open(output, encoding="utf-8") as file:
        for line in file:
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                logger.bind(stage="annotate").warning(f"Ignoring a broken line in {output}")
                continue
            if isinstance(record, dict) and record.get("causal_map") and "id" in record:
                done.add(str(record["id"]))
    return done


def make_run_dir(root: Path, flat_config: Mapping[str, str], command: str) -> Path:
    """Create <root>/<UTC timestamp>-<command>-<config hash>/.

    Returns:
        Path: The new directory.
    """
    stamp: str = datetime.now(tz=UTC).strftime("%Y%m%dT%H%M%S%f")
    run_dir: Path = root / f"{stamp}-{command}-{config_hash(flat_config)}"
    run_dir.mkdir(parents=True, exist_ok=False)
    logger.bind(stage="io").info(f"Writing outputs to {run_dir}")
    return run_dir
