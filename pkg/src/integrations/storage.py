"""On-disk formats for twinning and untwinning artifacts.

Binary files (models, checkpoints, history) share one layout: a single JSON
manifest line terminated by ``\\n`` followed by little-endian float64
payload. Manifests are written with sorted keys and carry no timestamps, so
identical runs produce byte-identical files. Wall-clock figures live in a
separate ``timing.json``.
"""

import json
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from ..core.errors import InvalidInput, StateError
from ..data.checkpoint_models import Checkpoint, StorePolicy
from ..data.topology import ClusterAssignment, ConnectivityMatrix
from ..data.traffic import TracePair, TrafficKind, TrafficTrace
from ..data.twin_model import ModelArch, TwinModel
from ..services.checkpoints import CheckpointStore
from ..services.twinning import RoundRecord, TopologyLogEntry, TwinHistory

FORMAT_VERSION = 1
CSV_SCHEMA = "# schema=1"
HISTORY_FILE = "history.bin"
MODEL_FILE = "model.bin"
STORE_INDEX = "store_index.json"
MANIFEST_FILE = "manifest.json"
TIMING_FILE = "timing.json"
LOCK_FILE = ".lock"


def _dumps(data: Dict[str, Any]) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def _write_blob(path: Path, manifest: Dict[str, Any], arrays: List[np.ndarray]) -> None:
    payload = b"".join(np.asarray(a, dtype="<f8").tobytes() for a in arrays)
    manifest = dict(manifest, byte_length=len(payload), version=FORMAT_VERSION)
    with open(path, "wb") as f:
        f.write(_dumps(manifest).encode("utf-8") + b"\n")
        f.write(payload)


def _read_blob(path: Path) -> Tuple[Dict[str, Any], np.ndarray]:
    if not Path(path).exists():
        raise StateError(f"Artifact not found: {path}")
    with open(path, "rb") as f:
        manifest = json.loads(f.readline().decode("utf-8"))
        payload = f.read()
    if len(payload) != manifest.get("byte_length"):
        raise StateError(f"{path} is truncated: expected {manifest.get('byte_length')} bytes, got {len(payload)}")
    return manifest, np.frombuffer(payload, dtype="<f8").astype(np.float64)


def _model_from_spec(spec: Dict[str, Any], params: np.ndarray) -> TwinModel:
    return TwinModel(params, ModelArch(spec["arch"]), spec["input_dim"], spec["hidden"], spec["bias"])


class _Cursor:
    """Sequential reader over a flat float64 payload."""

    def __init__(self, data: np.ndarray):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> np.ndarray:
        out = self.data[self.pos:self.pos + count]
        if out.shape[0] != count:
            raise StateError("Payload shorter than its manifest describes")
        self.pos += count
        return out.copy()


def write_model(path: Path, model: TwinModel, extra: Optional[Dict[str, Any]] = None) -> None:
    manifest = {"kind": "model", **model.spec(), **(extra or {})}
    _write_blob(Path(path), manifest, [model.params])


def read_model(path: Path) -> Tuple[TwinModel, Dict[str, Any]]:
    manifest, data = _read_blob(Path(path))
    return _model_from_spec(manifest, data[:manifest["d"]]), manifest


def write_checkpoint(directory: Path, checkpoint: Checkpoint) -> Path:
    """Write ``ckpt_<round>.bin``."""
    path = Path(directory) / f"ckpt_{checkpoint.round}.bin"
    arrays = [checkpoint.model.params]
    manifest = {
        "kind": "checkpoint",
        "round": checkpoint.round,
        "anchor": checkpoint.anchor,
        **checkpoint.model.spec(),
        "n": checkpoint.connectivity.n if checkpoint.connectivity is not None else 0,
        "connectivity_round": checkpoint.connectivity.round_tag if checkpoint.connectivity is not None else None,
        "clusters": checkpoint.clusters.to_dict() if checkpoint.clusters is not None else None,
    }
    if checkpoint.connectivity is not None:
        arrays.append(checkpoint.connectivity.values.reshape(-1))
    _write_blob(path, manifest, arrays)
    return path


def read_checkpoint(path: Path) -> Checkpoint:
    manifest, data = _read_blob(Path(path))
    cursor = _Cursor(data)
    model = _model_from_spec(manifest, cursor.take(manifest["d"]))
    n = manifest["n"]
    connectivity = None
    if n:
        connectivity = ConnectivityMatrix(cursor.take(n * n).reshape(n, n), manifest["connectivity_round"])
    clusters = ClusterAssignment.from_dict(manifest["clusters"]) if manifest["clusters"] else None
    return Checkpoint(manifest["round"], model, connectivity, clusters, manifest["anchor"])


def write_store(store: CheckpointStore, directory: Path, config_hash: str) -> Path:
    """Write every checkpoint plus ``store_index.json``; stale checkpoint files are removed."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stale in directory.glob("ckpt_*.bin"):
        stale.unlink()
    for t in store.rounds():
        write_checkpoint(directory, store.get(t))
    report = store.storage_report()
    state = store.state
    index = {
        "config_hash": config_hash,
        "policy": store.policy.to_dict(),
        "rounds": store.rounds(),
        "anchors": store.anchors(),
        "count": report.count,
        "bytes": report.bytes,
        "reduction": report.reduction,
        "p_t": state.p_t,
        "rounds_since_save": state.rounds_since_save,
        "last_round": state.last_round,
        "over_budget": state.over_budget,
    }
    path = directory / STORE_INDEX
    write_json(path, index)
    logger.debug(f"Wrote {len(index['rounds'])} checkpoints to {directory}")
    return path


def read_store(directory: Path) -> Tuple[CheckpointStore, Dict[str, Any]]:
    directory = Path(directory)
    index = read_json(directory / STORE_INDEX)
    store = CheckpointStore(StorePolicy(**index["policy"]))
    for t in index["rounds"]:
        store.state.checkpoints[t] = read_checkpoint(directory / f"ckpt_{t}.bin")
    store.state.p_t = index["p_t"]
    store.state.rounds_since_save = index["rounds_since_save"]
    store.state.last_round = index["last_round"]
    store.state.over_budget = index["over_budget"]
    last = store.state.checkpoints[max(index["rounds"])]
    store.state.last_model = last.model
    store.state.last_connectivity = last.connectivity
    return store, index


def write_history(path: Path, history: TwinHistory, config_hash: str) -> None:
    """Serialise a TwinHistory into ``history.bin``.

    Payload order: initial params; per round the global params followed by
    either every participant's local params (ascending id) or every summary
    set's sum (manifest order); then one N x N matrix per topology entry.
    """
    arrays = [history.initial_model.params]
    rounds = []
    for record in history.records:
        arrays.append(record.global_model.params)
        entry: Dict[str, Any] = {"round": record.round, "participating": sorted(record.participating)}
        if record.local_models is not None:
            ids = sorted(record.local_models)
            entry["locals"] = ids
            arrays.extend(record.local_models[n].params for n in ids)
        else:
            sets = sorted(record.set_sums or {}, key=lambda s: sorted(s))
            entry["sets"] = [[sorted(s), record.set_sums[s][1]] for s in sets]
            arrays.extend(record.set_sums[s][0] for s in sets)
        rounds.append(entry)
    topology = []
    for item in history.topology_log:
        topology.append({
            "round": item.round,
            "n": item.connectivity.n,
            "drift": item.drift,
            "reclustered": item.reclustered,
            "clusters": item.clusters.to_dict(),
        })
        arrays.append(item.connectivity.values.reshape(-1))
    manifest = {
        "kind": "history",
        "config_hash": config_hash,
        "model": history.initial_model.spec(),
        "rng_schedule": history.rng_schedule,
        "rounds": rounds,
        "topology": topology,
    }
    _write_blob(Path(path), manifest, arrays)


def read_history(path: Path) -> Tuple[TwinHistory, Dict[str, Any]]:
    manifest, data = _read_blob(Path(path))
    spec = manifest["model"]
    d = spec["d"]
    cursor = _Cursor(data)
    history = TwinHistory(_model_from_spec(spec, cursor.take(d)), rng_schedule=manifest["rng_schedule"])
    for entry in manifest["rounds"]:
        global_model = _model_from_spec(spec, cursor.take(d))
        record = RoundRecord(entry["round"], global_model, frozenset(entry["participating"]))
        if "locals" in entry:
            record.local_models = {n: _model_from_spec(spec, cursor.take(d)) for n in entry["locals"]}
        else:
            record.set_sums = {frozenset(ids): (cursor.take(d), count) for ids, count in entry["sets"]}
        history.append(record)
    for item in manifest["topology"]:
        n = item["n"]
        matrix = ConnectivityMatrix(cursor.take(n * n).reshape(n, n), item["round"])
        history.topology_log.append(TopologyLogEntry(
            item["round"], matrix, ClusterAssignment.from_dict(item["clusters"]), item["drift"], item["reclustered"]
        ))
    return history, manifest


def write_traces_csv(path: Path, traces: Dict[int, TracePair]) -> None:
    """Export traces as ``sensor_id,time_index,kind,value`` rows."""
    frames = []
    for sensor_id in sorted(traces):
        for kind in TrafficKind:
            trace = traces[sensor_id].get(kind)
            frames.append(pd.DataFrame({
                "sensor_id": sensor_id,
                "time_index": np.arange(len(trace)),
                "kind": kind.value,
                "value": trace.readings,
            }))
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)


def read_traces_csv(path: Path) -> Dict[int, TracePair]:
    """Import traces exported by ``write_traces_csv`` or real data in the same schema."""
    frame = pd.read_csv(path)
    required = {"sensor_id", "time_index", "kind", "value"}
    missing = required - set(frame.columns)
    if missing:
        raise InvalidInput(f"Trace CSV is missing columns: {sorted(missing)}")
    traces: Dict[int, TracePair] = {}
    for sensor_id, group in frame.groupby("sensor_id", sort=True):
        series = {}
        for kind in TrafficKind:
            rows = group[group["kind"] == kind.value].sort_values("time_index")
            if rows.empty:
                raise InvalidInput(f"Sensor {sensor_id} has no {kind.value} readings")
            series[kind] = TrafficTrace(int(sensor_id), rows["value"].to_numpy(), kind)
        traces[int(sensor_id)] = TracePair(series[TrafficKind.FLOW], series[TrafficKind.SPEED])
    return traces


def write_metrics_csv(path: Path, rows: List[Dict[str, Any]]) -> None:
    """Write a versioned metrics table."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(CSV_SCHEMA + "\n")
        pd.DataFrame(rows).to_csv(f, index=False, float_format="%.12g")


def read_metrics_csv(path: Path) -> pd.DataFrame:
    if not Path(path).exists():
        raise StateError(f"Metrics file not found: {path}")
    return pd.read_csv(path, comment="#")


def write_json(path: Path, data: Dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def read_json(path: Path) -> Dict[str, Any]:
    if not Path(path).exists():
        raise StateError(f"Artifact not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _json_default(value: Any) -> Any:
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(f"Cannot serialise {type(value).__name__}")


@contextmanager
def output_lock(directory: Path) -> Iterator[Path]:
    """Exclusive lock on an output directory for the duration of a command."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StateError(f"{directory} is locked by another command (remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)
