"""
Artifact persistence and fingerprints
manifest.json + weights.bin directories shared by checkpoints and task deltas
"""

import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import numpy as np
import structlog
from cryptography.hazmat.primitives import hashes
from pydantic import ValidationError

from config import settings
from errors import FormatError
from models import ArtifactManifest, TensorEntry

logger = structlog.get_logger(__name__)

MANIFEST_FILE = "manifest.json"
WEIGHTS_FILE = "weights.bin"
VOCAB_FILE = "vocab.txt"
WEIGHT_DTYPE = np.dtype("<f4")


def sha256_hex(chunks: Iterable[bytes]) -> str:
    """SHA-256 over the concatenation of ``chunks``"""
    digest = hashes.Hash(hashes.SHA256())
    for chunk in chunks:
        digest.update(chunk)
    return digest.finalize().hex()


def array_bytes(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype=WEIGHT_DTYPE).tobytes()


def write_artifact(
    directory: Path,
    manifest: ArtifactManifest,
    tensors: List[Tuple[str, np.ndarray]],
    extra_files: Dict[str, str] = None,
) -> ArtifactManifest:
    """Write tensors in the given order; the directory appears atomically"""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)

    entries = []
    offset = 0
    for name, array in tensors:
        count = int(array.size)
        entries.append(TensorEntry(name=name, shape=list(array.shape), offset=offset, count=count))
        offset += count
    manifest = manifest.model_copy(update={"tensors": entries, "format_version": settings.CHECKPOINT_FORMAT_VERSION})

    staging = Path(tempfile.mkdtemp(prefix=f".{directory.name}-", dir=directory.parent))
    try:
        with open(staging / WEIGHTS_FILE, "wb") as fh:
            for _, array in tensors:
                fh.write(array_bytes(array))
        (staging / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
        for filename, content in (extra_files or {}).items():
            (staging / filename).write_text(content, encoding="utf-8")

        if directory.exists():
            shutil.rmtree(directory)
        os.replace(staging, directory)
    except Exception:
        shutil.rmtree(staging, ignore_errors=True)
        raise

    logger.info("artifact_written", path=str(directory), kind=manifest.kind, tensors=len(entries), floats=offset)
    return manifest


def read_manifest(directory: Path) -> ArtifactManifest:
    path = Path(directory) / MANIFEST_FILE
    if not path.is_file():
        raise FormatError(f"{path} not found")
    try:
        manifest = ArtifactManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except (ValidationError, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path} is not a valid manifest: {e}")
    if manifest.format_version != settings.CHECKPOINT_FORMAT_VERSION:
        raise FormatError(
            f"{path} has format version {manifest.format_version}, "
            f"this build reads version {settings.CHECKPOINT_FORMAT_VERSION}"
        )
    return manifest


def read_artifact(directory: Path, expected_floats: int = None) -> Tuple[ArtifactManifest, Dict[str, np.ndarray]]:
    """Read and validate a whole artifact; nothing is returned on any inconsistency"""
    directory = Path(directory)
    manifest = read_manifest(directory)
    weights_path = directory / WEIGHTS_FILE
    if not weights_path.is_file():
        raise FormatError(f"{weights_path} not found")

    raw = weights_path.read_bytes()
    if len(raw) % WEIGHT_DTYPE.itemsize:
        raise FormatError(f"{weights_path} is truncated: {len(raw)} bytes is not a whole number of floats")
    blob = np.frombuffer(raw, dtype=WEIGHT_DTYPE)

    indexed = sum(entry.count for entry in manifest.tensors)
    if expected_floats is not None and expected_floats != blob.size:
        raise FormatError(
            f"manifest d_model={manifest.config.d_model} implies {expected_floats} floats "
            f"but {WEIGHTS_FILE} holds {blob.size}"
        )
    if indexed != blob.size:
        raise FormatError(f"manifest indexes {indexed} floats but {WEIGHTS_FILE} holds {blob.size}")

    tensors: Dict[str, np.ndarray] = {}
    for entry in manifest.tensors:
        if int(np.prod(entry.shape, dtype=np.int64)) != entry.count:
            raise FormatError(f"tensor {entry.name} shape {entry.shape} does not hold {entry.count} floats")
        end = entry.offset + entry.count
        if entry.offset < 0 or end > blob.size:
            raise FormatError(f"tensor {entry.name} spans [{entry.offset}, {end}) outside {WEIGHTS_FILE}")
        tensors[entry.name] = blob[entry.offset:end].astype(np.float32).reshape(entry.shape)

    logger.debug("artifact_read", path=str(directory), kind=manifest.kind, tensors=len(tensors))
    return manifest, tensors
