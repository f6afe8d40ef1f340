from __future__ import annotations

import csv
import json
from typing import TYPE_CHECKING

import pytest

from causal_attention_tuning import settings
from causal_attention_tuning.main import dispatch, parse_grid
from causal_attention_tuning.settings import ConfigurationError
from causal_attention_tuning.utils import read_jsonl

if TYPE_CHECKING:
    from pathlib import Path

tiny_model: list[str] = [
    "--set",
    "model.d_model=8",
    "--set",
    "model.d_k=4",
    "--set",
    "model.d_v=4",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.n_layers=1",
    "--set",
    "model.max_seq_len=128",
    "--set",
    "model.dtype=float64",
    "--set",
    "train.epochs=1",
    "--set",
    "train.batch_size=8",
    "--set",
    "eval.decoding=choice",
]


def run_dir(root: Path, command: str) -> Path:
    (path,) = root.glob(f"*-{command}-*")
    return path


def generate_data(root: Path) -> Path:
    assert dispatch(["gen", "--out", str(root), "--train-count", "16", "--test-count", "6", "--seed", "3"]) == 0
    return run_dir(root, "gen")


def test_parse_grid() -> None:
    assert parse_grid("0.05:0.35:0.05") == [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35]
    assert len(parse_grid("0.05:0.3:0.05")) == 6
    assert parse_grid("0.1, 0.4") == [0.1, 0.4]
    assert parse_grid("0.2:0.2:0.1") == [0.2]
    for bad in ("", "0.3:0.1:0.05", "0.1:0.2:0", "a:b:c", "0.1:0.2"):
        with pytest.raises(ConfigurationError):
            parse_grid(bad)


def test_usage_errors_return_two() -> None:
    assert dispatch([]) == 2
    assert dispatch(["gen", "--variant", "x"]) == 2
    assert dispatch(["train", "--no-such-flag"]) == 2


def test_gen_writes_splits_and_snapshot(tmp_path: Path) -> None:
    data: Path = generate_data(tmp_path)
    assert len(read_jsonl(data / "train.jsonl")) == 16
    assert len(read_jsonl(data / "test_iid.jsonl")) == 6
    assert len(read_jsonl(data / "test_ood.jsonl")) == 6
    snapshot: str = (data / "config.snapshot.ini").read_text(encoding="utf-8")
    assert "[stg]" in snapshot
    assert "train_count = 16" in snapshot


def test_rerun_from_snapshot_is_byte_identical(tmp_path: Path) -> None:
    first: Path = generate_data(tmp_path / "first")
    assert dispatch(["gen", "--config", str(first / "config.snapshot.ini"), "--out", str(tmp_path / "second")]) == 0
    second: Path = run_dir(tmp_path / "second", "gen")
    for name in ("train.jsonl", "test_iid.jsonl", "test_ood.jsonl", "config.snapshot.ini"):
        assert (first / name).read_bytes() == (second / name).read_bytes()

    runs: Path = tmp_path / "runs"
    assert dispatch(["train", "--data", str(first), "--out", str(runs / "a"), *tiny_model]) == 0
    trained: Path = run_dir(runs / "a", "train")
    assert dispatch(["train", "--config", str(trained / "config.snapshot.ini"), "--out", str(runs / "b")]) == 0
    retrained: Path = run_dir(runs / "b", "train")
    for name in ("model.ckpt", "vocab.txt", "results.csv", "config.snapshot.ini"):
        assert (trained / name).read_bytes() == (retrained / name).read_bytes()


def test_train_eval_and_export(tmp_path: Path) -> None:
    data: Path = generate_data(tmp_path / "data")
    runs: Path = tmp_path / "runs"

    assert dispatch(["train", "--data", str(data), "--out", str(runs), "--alpha", "0.3", *tiny_model]) == 0
    trained: Path = run_dir(runs, "train")
    for name in ("run_record.jsonl", "vocab.txt", "model.ckpt", "results.csv", "config.snapshot.ini"):
        assert (trained / name).is_file()
    with (trained / "results.csv").open(encoding="utf-8", newline="") as file:
        (row,) = list(csv.DictReader(file))
    assert row["mode"] == "cat"
    assert float(row["alpha"]) == 0.3
    assert 0.0 <= float(row["iid_accuracy"]) <= 1.0

    checkpoint: str = str(trained / "model.ckpt")
    assert dispatch(["eval", "--checkpoint", checkpoint, "--data", str(data), "--out", str(runs), "--decoding", "choice"]) == 0
    evaluated: Path = run_dir(runs, "eval")
    for split in ("test_iid", "test_ood"):
        report: dict = json.loads((evaluated / f"report_{split}.json").read_text(encoding="utf-8"))
        assert report["split"] == split
        assert report["total"] == 6
        assert report["attention"]["alpha"] == 0.3
        assert (evaluated / f"density_{split}.csv").is_file()

    test_file: str = str(data / "test_iid.jsonl")
    assert dispatch(["export-attn", "--checkpoint", checkpoint, "--data", test_file, "--index", "2", "--out", str(runs)]) == 0
    assert (run_dir(runs, "export-attn") / "heatmap_2.csv").is_file()


def test_sweep_writes_one_row_per_alpha(tmp_path: Path) -> None:
    data: Path = generate_data(tmp_path / "data")
    runs: Path = tmp_path / "runs"
    assert dispatch(["sweep", "--data", str(data), "--alphas", "0.1,0.2", "--out", str(runs), *tiny_model]) == 0
    swept: Path = run_dir(runs, "sweep")
    with (swept / "sweep.csv").open(encoding="utf-8", newline="") as file:
        rows: list[dict[str, str]] = list(csv.DictReader(file))
    assert [row["alpha"] for row in rows] == ["0.1", "0.2"]
    assert (swept / "alpha_0.1" / "run_record.jsonl").is_file()
    assert "alpha = 0.2" in (swept / "alpha_0.2" / "config.snapshot.ini").read_text(encoding="utf-8")


def test_failures_return_one(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    assert dispatch(["train", "--out", str(tmp_path)]) == 1
    assert dispatch(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == 1
    assert dispatch(["gen", "--out", str(tmp_path), "--set", "nodot=1"]) == 1
    assert dispatch(["gen", "--out", str(tmp_path), "--config", str(tmp_path / "missing.ini")]) == 1

    source: Path = tmp_path / "train.jsonl"
    source.write_text('{"question": "Q?", "answer": "1"}\n', encoding="utf-8")
    monkeypatch.delenv(settings.api_key_variable, raising=False)
    assert dispatch(["annotate", "--in", str(source), "--out", str(tmp_path)]) == 1


def test_export_rejects_bad_index(tmp_path: Path) -> None:
    data: Path = generate_data(tmp_path / "data")
    runs: Path = tmp_path / "runs"
    assert dispatch(["train", "--data", str(data), "--out", str(runs), "--mode", "vanilla", *tiny_model]) == 0
    checkpoint: str = str(run_dir(runs, "train") / "model.ckpt")
    test_file: str = str(data / "test_iid.jsonl")
    assert dispatch(["export-attn", "--checkpoint", checkpoint, "--data", test_file, "--index", "99", "--out", str(runs)]) == 1


def test_cost_command(tmp_path: Path) -> None:
    assert dispatch(["cost", "--out", str(tmp_path)]) == 0
    result: dict = json.loads((run_dir(tmp_path, "cost") / "cost.json").read_text(encoding="utf-8"))
    assert result["cost_per_million_input_tokens"] == pytest.approx(18.19, abs=0.01)

    assert dispatch(["cost", "--out", str(tmp_path / "single"), "--single-rate", "0.25"]) == 0
    single: dict = json.loads((run_dir(tmp_path / "single", "cost") / "cost.json").read_text(encoding="utf-8"))
    assert single["cost_per_million_input_tokens"] == pytest.approx(1.09, abs=0.01)


def test_snapshot_records_inputs_and_defaults(tmp_path: Path) -> None:
    data: Path = generate_data(tmp_path / "data")
    runs: Path = tmp_path / "runs"
    assert dispatch(["train", "--data", str(data), "--out", str(runs), *tiny_model]) == 0
    snapshot: str = (run_dir(runs, "train") / "config.snapshot.ini").read_text(encoding="utf-8")
    assert "[run]" in snapshot
    assert f"data = {data}" in snapshot
    expected: tuple[str, ...] = ("mode = cat", "alpha = 0.2", "learning_rate = 0.0003", "ffn_multiplier = 4", "gamma_one_based = false")
    for line in (*expected, "decoding = choice"):
        assert line in snapshot

    gen_snapshot: str = (data / "config.snapshot.ini").read_text(encoding="utf-8")
    for line in ("variant = e", "size = s", "balance = true", "shuffle_factors = false"):
        assert line in gen_snapshot


def test_eval_and_export_rerun_from_snapshot(tmp_path: Path) -> None:
    data: Path = generate_data(tmp_path / "data")
    runs: Path = tmp_path / "runs"
    assert dispatch(["train", "--data", str(data), "--out", str(runs / "train"), *tiny_model]) == 0
    checkpoint: str = str(run_dir(runs / "train", "train") / "model.ckpt")

    assert dispatch(["eval", "--checkpoint", checkpoint, "--data", str(data), "--decoding", "choice", "--out", str(runs / "eval_a")]) == 0
    first: Path = run_dir(runs / "eval_a", "eval")
    assert f"checkpoint = {checkpoint}" in (first / "config.snapshot.ini").read_text(encoding="utf-8")
    assert dispatch(["eval", "--config", str(first / "config.snapshot.ini"), "--out", str(runs / "eval_b")]) == 0
    second: Path = run_dir(runs / "eval_b", "eval")
    for name in ("report_test_iid.json", "report_test_ood.json", "density_test_ood.csv", "config.snapshot.ini"):
        assert (first / name).read_bytes() == (second / name).read_bytes()

    test_file: str = str(data / "test_ood.jsonl")
    assert dispatch(["export-attn", "--checkpoint", checkpoint, "--data", test_file, "--index", "1", "--out", str(runs / "heat_a")]) == 0
    exported: Path = run_dir(runs / "heat_a", "export-attn")
    assert dispatch(["export-attn", "--config", str(exported / "config.snapshot.ini"), "--out", str(runs / "heat_b")]) == 0
    assert (exported / "heatmap_1.csv").read_bytes() == (run_dir(runs / "heat_b", "export-attn") / "heatmap_1.csv").read_bytes()
