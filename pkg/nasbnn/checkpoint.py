"""
Checkpoint containers and run manifests.
"""
import hashlib
import json
import logging
import random
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar, Union

import numpy as np
import torch
from pydantic import BaseModel, ValidationError

from . import NasBnnError

logger = logging.getLogger(__name__)

CONTAINER_FORMAT = 1
MANIFEST_NAME = "manifest.json"

ModelT = TypeVar("ModelT", bound=BaseModel)


class CheckpointError(NasBnnError):
    """Checkpoint cannot be read, written, or is of the wrong kind."""
    pass


class SchemaMismatchError(CheckpointError):
    """Architecture or checkpoint belongs to a different search space."""
    pass


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def config_hash(config: Union[BaseModel, Dict[str, Any], None]) -> str:
    """sha256 of the canonical JSON form (sorted keys, no whitespace)."""
    if config is None:
        payload: Any = {}
    elif isinstance(config, BaseModel):
        payload = json.loads(config.model_dump_json())
    else:
        payload = config
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def capture_rng_state() -> Dict[str, Any]:
    return {
        "python": random.getstate(),
        "numpy": np.random.get_state(),
        "torch": torch.get_rng_state(),
    }


def restore_rng_state(state: Dict[str, Any]) -> None:
    random.setstate(state["python"])
    np.random.set_state(state["numpy"])
    torch.set_rng_state(state["torch"])


def save_checkpoint(path: Union[str, Path], kind: str, payload: Dict[str, Any], space_id: str,
                    epoch: int = 0, config: Union[BaseModel, Dict[str, Any], None] = None,
                    rng_state: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write a named-tensor container with a metadata block.

    Args:
        path: Destination file
        kind: "supernet" or "subnet"
        payload: Tensors and any extra entries (state, optimizer, arch, ...)
        space_id: Search space the weights belong to
        epoch: Completed epochs
        config: Config whose hash is recorded
        rng_state: RNG snapshot, captured now when omitted

    Returns:
        The written path
    """
    path = Path(path)
    container = {
        "format": CONTAINER_FORMAT,
        "metadata": {
            "kind": kind,
            "space_id": space_id,
            "epoch": epoch,
            "config_hash": config_hash(config),
            "rng_state": rng_state if rng_state is not None else capture_rng_state(),
            "saved_at": _utcnow(),
        },
        **payload,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(container, tmp)
        tmp.replace(path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}")
    logger.info("saved %s checkpoint %s (epoch %d)", kind, path, epoch)
    return path


def load_checkpoint(path: Union[str, Path], kind: Optional[str] = None,
                    space_id: Optional[str] = None) -> Dict[str, Any]:
    """Read a container; optionally require its kind and search space."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        container = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    if not isinstance(container, dict) or container.get("format") != CONTAINER_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint container")
    metadata = container.get("metadata")
    if not isinstance(metadata, dict) or "kind" not in metadata or "space_id" not in metadata:
        raise CheckpointError(f"{path} has no usable metadata block")
    if kind is not None and metadata["kind"] != kind:
        raise CheckpointError(f"{path} holds a {metadata['kind']} checkpoint, expected {kind}")
    if space_id is not None and metadata["space_id"] != space_id:
        raise SchemaMismatchError(f"{path} belongs to space '{metadata['space_id']}', not '{space_id}'")
    return container


def read_block(container: Dict[str, Any], key: str, model: Type[ModelT]) -> ModelT:
    """Validate a stored config block ("space", "net", "train_config") of a loaded container."""
    if key not in container:
        raise CheckpointError(f"checkpoint has no '{key}' block")
    try:
        return model.model_validate(container[key])
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"]) or "<root>"
        raise CheckpointError(f"checkpoint '{key}' block is invalid at '{field}': {first['msg']}")


def load_weights(target, state: Any, source: str = "checkpoint") -> None:
    """`load_state_dict` for modules, optimizers and schedulers, with shape and key errors as CheckpointError."""
    try:
        target.load_state_dict(state)
    except (RuntimeError, ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{source} does not fit {type(target).__name__}: {e}")


def check_space(arch_space_id: str, checkpoint_space_id: str) -> None:
    if arch_space_id != checkpoint_space_id:
        raise SchemaMismatchError(f"architecture space '{arch_space_id}' does not match "
                                  f"checkpoint space '{checkpoint_space_id}'")


class RunManifest(BaseModel):
    """One per CLI run; enough to replay the run."""
    command: str
    config_hash: str
    space_id: str
    seed: int
    started_at: str
    finished_at: Optional[str] = None
    status: str = "running"
    config: Dict[str, Any] = {}
    artifacts: Dict[str, str] = {}

    @classmethod
    def start(cls, command: str, config: Union[BaseModel, Dict[str, Any], None], space_id: str,
              seed: int) -> "RunManifest":
        payload = json.loads(config.model_dump_json()) if isinstance(config, BaseModel) else (config or {})
        return cls(command=command, config_hash=config_hash(config), space_id=space_id, seed=seed,
                   started_at=_utcnow(), config=payload)

    def finish(self, status: str = "ok") -> "RunManifest":
        self.finished_at = _utcnow()
        self.status = status
        return self

    def write(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST_NAME
        path.write_text(self.model_dump_json(indent=2))
        return path
