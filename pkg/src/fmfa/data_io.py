"""Binary embedding files, the dataset manifest, and synthetic data.

A dataset directory holds three files: ``text.fmeb`` with the text global
embeddings plus, when present, each pair's token and patch features;
``image.fmeb`` with the image globals; and ``manifest.jsonl`` pairing rows
of the two files by sample id and assigning identity labels.

The embedding file layout is fixed little-endian: the magic bytes
``FMEB``, then version, row count, dimension, and flags as unsigned
32-bit integers. Row-major float64 globals follow. When flags bit 0 is
set, each sample then contributes a token count, its token rows, a patch
count, and its patch rows, in sample order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .global_align import EmbeddingSet
from .local_align import LocalFeatureBatch

__all__ = [
    "EmbeddingFileError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedFileError",
    "CountMismatchError",
    "ManifestError",
    "ManifestEntry",
    "PairedDataset",
    "write_embedding_file",
    "read_embedding_file",
    "write_manifest",
    "read_manifest",
    "write_dataset",
    "load_dataset",
    "sample_dataset",
    "make_dataset",
    "synthesize_dataset",
    "TEXT_FILE",
    "IMAGE_FILE",
    "MANIFEST_FILE",
]

MAGIC = b"FMEB"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_U32 = struct.Struct("<I")

TEXT_FILE = "text.fmeb"
IMAGE_FILE = "image.fmeb"
MANIFEST_FILE = "manifest.jsonl"


class EmbeddingFileError(Exception):
    """Base class for embedding file format failures."""


class BadMagicError(EmbeddingFileError):
    pass


class VersionMismatchError(EmbeddingFileError):
    pass


class TruncatedFileError(EmbeddingFileError):
    pass


class CountMismatchError(EmbeddingFileError):
    pass


class ManifestError(Exception):
    pass


def write_embedding_file(path, globals_, locals_=None) -> None:
    """Write one modality's embeddings, optionally with local features.

    ``locals_`` is a list of (tokens, patches) matrix pairs, one per row
    of ``globals_``.
    """
    globals_ = np.ascontiguousarray(np.asarray(globals_, dtype=np.float64))
    if globals_.ndim != 2:
        raise ValueError(f"globals must be 2-D, got shape {globals_.shape}")
    count, dim = globals_.shape
    if count < 1 or dim < 1:
        raise ValueError(f"globals must be non-empty, got shape {globals_.shape}")
    flags = 1 if locals_ is not None else 0
    chunks = [_HEADER.pack(MAGIC, VERSION, count, dim, flags)]
    chunks.append(globals_.tobytes())
    if locals_ is not None:
        if len(locals_) != count:
            raise ValueError(f"got {len(locals_)} local records for {count} rows")
        for i, (tokens, patches) in enumerate(locals_):
            tokens = np.ascontiguousarray(np.asarray(tokens, dtype=np.float64))
            patches = np.ascontiguousarray(np.asarray(patches, dtype=np.float64))
            for name, arr in (("tokens", tokens), ("patches", patches)):
                if arr.ndim != 2 or arr.shape[1] != dim:
                    raise ValueError(
                        f"sample {i} {name} must be 2-D with {dim} columns, "
                        f"got shape {arr.shape}"
                    )
            chunks.append(_U32.pack(tokens.shape[0]))
            chunks.append(tokens.tobytes())
            chunks.append(_U32.pack(patches.shape[0]))
            chunks.append(patches.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def _take_rows(data: bytes, offset: int, rows: int, dim: int, what: str):
    nbytes = rows * dim * 8
    if offset + nbytes > len(data):
        raise TruncatedFileError(
            f"file ends inside {what}: need {nbytes} bytes at offset {offset}, "
            f"have {len(data) - offset}"
        )
    arr = np.frombuffer(data, dtype="<f8", count=rows * dim, offset=offset)
    return arr.reshape(rows, dim).copy(), offset + nbytes


def read_embedding_file(path):
    """Read an embedding file, returning (globals, locals or None).

    Raises a distinct error for a bad magic, an unsupported version, a
    body shorter than the header declares, or trailing bytes beyond it.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TruncatedFileError(
            f"file is {len(data)} bytes, shorter than the {_HEADER.size}-byte header"
        )
    magic, version, count, dim, flags = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {VERSION}")
    offset = _HEADER.size
    globals_, offset = _take_rows(data, offset, count, dim, "globals")
    locals_ = None
    if flags & 1:
        locals_ = []
        for i in range(count):
            if offset + _U32.size > len(data):
                raise TruncatedFileError(f"file ends before sample {i} token count")
            (num_tokens,) = _U32.unpack_from(data, offset)
            offset += _U32.size
            tokens, offset = _take_rows(data, offset, num_tokens, dim, f"sample {i} tokens")
            if offset + _U32.size > len(data):
                raise TruncatedFileError(f"file ends before sample {i} patch count")
            (num_patches,) = _U32.unpack_from(data, offset)
            offset += _U32.size
            patches, offset = _take_rows(data, offset, num_patches, dim, f"sample {i} patches")
            locals_.append((tokens, patches))
    if offset != len(data):
        raise CountMismatchError(
            f"{len(data) - offset} trailing bytes beyond the declared {count} rows"
        )
    return globals_, locals_


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: int
    identity: int
    modality: str
    embedding_index: int


def write_manifest(path, identities) -> None:
    """One text and one image record per sample, row i in both files."""
    lines = []
    for i, identity in enumerate(identities):
        for modality in ("text", "image"):
            lines.append(
                json.dumps(
                    {
                        "sample_id": i,
                        "identity": int(identity),
                        "modality": modality,
                        "embedding_index": i,
                    },
                    sort_keys=True,
                )
            )
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: invalid JSON: {exc}") from None
        if not isinstance(record, dict):
            raise ManifestError(f"line {lineno}: expected an object")
        try:
            entry = ManifestEntry(
                sample_id=record["sample_id"],
                identity=record["identity"],
                modality=record["modality"],
                embedding_index=record["embedding_index"],
            )
        except KeyError as exc:
            raise ManifestError(f"line {lineno}: missing field {exc}") from None
        for name in ("sample_id", "identity", "embedding_index"):
            if not isinstance(getattr(entry, name), int) or isinstance(getattr(entry, name), bool):
                raise ManifestError(f"line {lineno}: {name} must be an integer")
        if entry.identity < 0:
            raise ManifestError(f"line {lineno}: identity must be non-negative")
        if entry.embedding_index < 0:
            raise ManifestError(f"line {lineno}: embedding_index must be non-negative")
        if entry.modality not in ("text", "image"):
            raise ManifestError(f"line {lineno}: unknown modality {entry.modality!r}")
        entries.append(entry)
    if not entries:
        raise ManifestError("manifest is empty")
    return entries


@dataclass
class PairedDataset:
    """In-memory paired dataset: globals per modality plus optional locals."""

    text_globals: np.ndarray
    image_globals: np.ndarray
    identities: np.ndarray
    tokens: list[np.ndarray] | None = None
    patches: list[np.ndarray] | None = None

    @property
    def num_samples(self) -> int:
        return self.text_globals.shape[0]

    @property
    def has_locals(self) -> bool:
        return self.tokens is not None and self.patches is not None

    def subset(self, indices) -> "PairedDataset":
        indices = np.asarray(indices)
        return PairedDataset(
            text_globals=self.text_globals[indices],
            image_globals=self.image_globals[indices],
            identities=self.identities[indices],
            tokens=[self.tokens[i] for i in indices] if self.tokens is not None else None,
            patches=[self.patches[i] for i in indices] if self.patches is not None else None,
        )

    def embedding_set(self) -> EmbeddingSet:
        return EmbeddingSet(self.text_globals, self.image_globals, self.identities)

    def local_batch(self) -> LocalFeatureBatch:
        if not self.has_locals:
            raise ValueError("dataset has no local features")
        return LocalFeatureBatch(self.tokens, self.patches, self.identities)


def sample_dataset(
    num_identities: int,
    samples_per_id: int,
    dim: int,
    tokens_per_sample: int,
    patches_per_sample: int,
    noise_sigma: float,
    rng: np.random.Generator,
) -> PairedDataset:
    """Draw a paired dataset around shared per-identity prototypes.

    Each identity gets one global prototype and one patch prototype per
    patch slot; token prototypes are copies of randomly chosen patch
    prototypes, so tokens and patches of the same identity stay
    geometrically alignable. Every emitted sample is its prototype plus
    isotropic Gaussian noise of scale ``noise_sigma``.
    """
    if num_identities < 1 or samples_per_id < 1:
        raise ValueError("need at least one identity and one sample per identity")
    if noise_sigma < 0.0:
        raise ValueError(f"noise_sigma must be non-negative, got {noise_sigma}")
    global_protos = rng.standard_normal((num_identities, dim))
    patch_protos = rng.standard_normal((num_identities, patches_per_sample, dim))
    token_choice = rng.integers(0, patches_per_sample, (num_identities, tokens_per_sample))

    def noise(shape):
        return noise_sigma * rng.standard_normal(shape)

    text_globals = []
    image_globals = []
    tokens = []
    patches = []
    identities = []
    for identity in range(num_identities):
        token_protos = patch_protos[identity][token_choice[identity]]
        for _ in range(samples_per_id):
            text_globals.append(global_protos[identity] + noise(dim))
            image_globals.append(global_protos[identity] + noise(dim))
            tokens.append(token_protos + noise(token_protos.shape))
            patches.append(patch_protos[identity] + noise(patch_protos[identity].shape))
            identities.append(identity)
    return PairedDataset(
        text_globals=np.asarray(text_globals),
        image_globals=np.asarray(image_globals),
        identities=np.asarray(identities, dtype=np.int64),
        tokens=tokens,
        patches=patches,
    )


def make_dataset(
    num_identities: int,
    samples_per_id: int,
    dim: int,
    tokens_per_sample: int,
    patches_per_sample: int,
    noise_sigma: float,
    seed: int,
) -> PairedDataset:
    rng = np.random.default_rng(seed)
    return sample_dataset(
        num_identities, samples_per_id, dim, tokens_per_sample, patches_per_sample,
        noise_sigma, rng,
    )


def write_dataset(directory, dataset: PairedDataset) -> dict[str, Path]:
    """Write a dataset directory; returns the paths that were written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "text": directory / TEXT_FILE,
        "image": directory / IMAGE_FILE,
        "manifest": directory / MANIFEST_FILE,
    }
    locals_ = None
    if dataset.has_locals:
        locals_ = list(zip(dataset.tokens, dataset.patches))
    write_embedding_file(paths["text"], dataset.text_globals, locals_)
    write_embedding_file(paths["image"], dataset.image_globals)
    write_manifest(paths["manifest"], dataset.identities)
    return paths


def synthesize_dataset(
    directory,
    num_identities: int,
    samples_per_id: int,
    dim: int,
    tokens_per_sample: int,
    patches_per_sample: int,
    noise_sigma: float,
    seed: int,
) -> dict[str, Path]:
    """Generate a synthetic dataset and write it to ``directory``."""
    dataset = make_dataset(
        num_identities, samples_per_id, dim, tokens_per_sample, patches_per_sample,
        noise_sigma, seed,
    )
    return write_dataset(directory, dataset)


def load_dataset(directory) -> PairedDataset:
    """Read a dataset directory back into memory.

    The manifest must pair every sample id with exactly one text and one
    image record carrying the same identity, and every embedding index
    must fall inside its file.
    """
    directory = Path(directory)
    entries = read_manifest(directory / MANIFEST_FILE)
    text_globals, text_locals = read_embedding_file(directory / TEXT_FILE)
    image_globals, _ = read_embedding_file(directory / IMAGE_FILE)

    by_sample: dict[int, dict[str, ManifestEntry]] = {}
    for entry in entries:
        slot = by_sample.setdefault(entry.sample_id, {})
        if entry.modality in slot:
            raise ManifestError(
                f"sample {entry.sample_id} has more than one {entry.modality} record"
            )
        slot[entry.modality] = entry

    counts = {"text": text_globals.shape[0], "image": image_globals.shape[0]}
    rows = {"text": [], "image": []}
    identities = []
    for sample_id in sorted(by_sample):
        slot = by_sample[sample_id]
        if set(slot) != {"text", "image"}:
            missing = {"text", "image"} - set(slot)
            raise ManifestError(f"sample {sample_id} is missing its {missing.pop()} record")
        if slot["text"].identity != slot["image"].identity:
            raise ManifestError(
                f"sample {sample_id} identity differs between modalities: "
                f"{slot['text'].identity} vs {slot['image'].identity}"
            )
        for modality in ("text", "image"):
            index = slot[modality].embedding_index
            if index >= counts[modality]:
                raise ManifestError(
                    f"sample {sample_id} {modality} embedding_index {index} is outside "
                    f"the file's {counts[modality]} rows"
                )
            rows[modality].append(index)
        identities.append(slot["text"].identity)

    text_rows = np.asarray(rows["text"])
    image_rows = np.asarray(rows["image"])
    tokens = patches = None
    if text_locals is not None:
        tokens = [text_locals[i][0] for i in text_rows]
        patches = [text_locals[i][1] for i in text_rows]
    return PairedDataset(
        text_globals=text_globals[text_rows],
        image_globals=image_globals[image_rows],
        identities=np.asarray(identities, dtype=np.int64),
        tokens=tokens,
        patches=patches,
    )
