"""File formats, dataset loading, and synthetic dataset generation.

One binary container holds every dense matrix this project stores: region
features, the concept bank, embedding dumps, and checkpoint parameter blocks.
Header: 4-byte magic, u32 version selecting the payload dtype (1 = float32
for bulk storage, 2 = float64 for checkpoint state that must round-trip
bit-exactly), then u64 rows and cols, then the row-major little-endian
payload.  Writes go to a temp file and are renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cider import tokenize
from .consensus import CorpusEmbedding, concept_label

MAGIC = b"AMSP"
VERSION_F32 = 1
VERSION_F64 = 2
_DTYPES = {VERSION_F32: "<f4", VERSION_F64: "<f8"}
_HEADER = struct.Struct("<4sIQQ")


class DataFormatError(Exception):
    category = "data-format"


class BadMagicError(DataFormatError):
    pass


class UnsupportedVersionError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class DegenerateShapeError(DataFormatError):
    pass


class ManifestError(Exception):
    category = "manifest"


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def matrix_bytes(matrix: np.ndarray, version: int = VERSION_F32) -> bytes:
    matrix = np.asarray(matrix)
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.ndim != 2 or matrix.shape[0] == 0 or matrix.shape[1] == 0:
        raise DegenerateShapeError(f"refusing to serialize matrix of shape {matrix.shape}")
    if version not in _DTYPES:
        raise UnsupportedVersionError(f"unknown container version {version}")
    header = _HEADER.pack(MAGIC, version, matrix.shape[0], matrix.shape[1])
    return header + np.ascontiguousarray(matrix, dtype=_DTYPES[version]).tobytes()


def parse_matrix(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one matrix record from ``buf``; returns (matrix, next offset)."""
    if len(buf) - offset < _HEADER.size:
        raise TruncatedFileError(
            f"header needs {_HEADER.size} bytes, only {len(buf) - offset} available"
        )
    magic, version, rows, cols = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version not in _DTYPES:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    if rows == 0 or cols == 0:
        raise DegenerateShapeError(f"degenerate matrix shape {rows}x{cols}")
    dtype = np.dtype(_DTYPES[version])
    need = rows * cols * dtype.itemsize
    start = offset + _HEADER.size
    if len(buf) - start < need:
        raise TruncatedFileError(
            f"payload needs {need} bytes, only {len(buf) - start} available"
        )
    flat = np.frombuffer(buf, dtype=dtype, count=rows * cols, offset=start)
    return flat.reshape(rows, cols).copy(), start + need


def save_matrix(path: str | Path, matrix: np.ndarray, version: int = VERSION_F32) -> None:
    _atomic_write(Path(path), matrix_bytes(matrix, version))


def load_matrix(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    matrix, end = parse_matrix(buf)
    if end != len(buf):
        raise TruncatedFileError(f"trailing {len(buf) - end} bytes after matrix payload")
    return matrix


# ---------------------------------------------------------------------------
# bundles: one JSON header plus a sequence of named matrix records


def save_bundle(path: str | Path, header: dict, matrices: dict[str, tuple[np.ndarray, int]]) -> None:
    """Write a deterministic multi-matrix container.

    ``matrices`` maps name -> (array, container version); record order and
    the JSON header bytes are fixed by sorted keys, so identical content
    always produces identical bytes.
    """
    names = sorted(matrices)
    full_header = dict(header)
    full_header["matrices"] = names
    header_bytes = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [struct.pack("<Q", len(header_bytes)), header_bytes]
    for name in names:
        arr, version = matrices[name]
        chunks.append(matrix_bytes(arr, version))
    _atomic_write(Path(path), b"".join(chunks))


def load_bundle(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise TruncatedFileError("bundle too short for its header length field")
    (header_len,) = struct.unpack_from("<Q", buf, 0)
    if len(buf) < 8 + header_len:
        raise TruncatedFileError(f"bundle header needs {header_len} bytes")
    header = json.loads(buf[8 : 8 + header_len].decode())
    offset = 8 + header_len
    matrices = {}
    for name in header["matrices"]:
        matrices[name], offset = parse_matrix(buf, offset)
    if offset != len(buf):
        raise TruncatedFileError(f"trailing {len(buf) - offset} bytes after bundle payload")
    return header, matrices


# ---------------------------------------------------------------------------
# caption files and manifests


@dataclass
class CaptionRecord:
    image_id: str
    caption_id: str
    text: str


def save_captions(path: str | Path, records: list[CaptionRecord]) -> None:
    lines = [f"{r.image_id}\t{r.caption_id}\t{r.text}" for r in records]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def load_captions(path: str | Path) -> list[CaptionRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t", 2)
        if len(parts) != 3:
            raise DataFormatError(f"{path}:{lineno}: expected image_id<TAB>caption_id<TAB>text")
        records.append(CaptionRecord(*parts))
    return records


@dataclass
class Dataset:
    """Everything the trainer and evaluator need, loaded and index-mapped."""

    image_ids: list[str]
    features: np.ndarray  # (n_images, regions, d_in) float64
    captions: list[CaptionRecord]
    caption_tokens: list[list[str]]
    caption_indices: list[list[int]]  # encoder vocabulary indices
    vocabulary: list[str]
    corpus: CorpusEmbedding
    labels: np.ndarray  # (n_captions, z)
    caption_to_image: list[int]
    image_to_captions: list[list[int]]
    splits: dict[str, list[int]]
    fingerprint: str

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    @property
    def n_captions(self) -> int:
        return len(self.captions)


def load_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
    required = {"features", "regions_per_image", "captions", "corpus", "concept_vocab", "image_ids", "splits"}
    missing = required - manifest.keys()
    if missing:
        raise ManifestError(f"{path}: missing manifest keys: {sorted(missing)}")
    return manifest


def validate_splits(image_ids: list[str], splits: dict) -> None:
    known = set(image_ids)
    seen: dict[str, str] = {}
    for split_name, ids in splits.items():
        for image_id in ids:
            if image_id not in known:
                raise ManifestError(f"split {split_name} references unknown image {image_id}")
            if image_id in seen:
                raise ManifestError(
                    f"image {image_id} appears in splits {seen[image_id]} and {split_name}"
                )
            seen[image_id] = split_name
    unassigned = known - seen.keys()
    if unassigned:
        raise ManifestError(f"images missing from all splits: {sorted(unassigned)[:5]}")


def load_dataset(manifest_path: str | Path) -> Dataset:
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent

    def resolve(key):
        p = Path(manifest[key])
        return p if p.is_absolute() else base / p

    for key in ("features", "captions", "corpus", "concept_vocab"):
        if not resolve(key).exists():
            raise ManifestError(f"manifest references missing file: {manifest[key]}")

    image_ids = list(manifest["image_ids"])
    regions = int(manifest["regions_per_image"])
    flat = load_matrix(resolve("features"))
    if flat.shape[0] != len(image_ids) * regions:
        raise ManifestError(
            f"feature rows {flat.shape[0]} != {len(image_ids)} images x {regions} regions"
        )
    features = flat.astype(np.float64).reshape(len(image_ids), regions, flat.shape[1])

    concept_vocab = [w for w in resolve("concept_vocab").read_text().splitlines() if w.strip()]
    corpus = CorpusEmbedding(vectors=load_matrix(resolve("corpus")).astype(np.float64), concept_vocab=concept_vocab)

    records = load_captions(resolve("captions"))
    image_index = {image_id: i for i, image_id in enumerate(image_ids)}
    caption_to_image = []
    image_to_captions: list[list[int]] = [[] for _ in image_ids]
    caption_tokens = []
    for j, record in enumerate(records):
        if record.image_id not in image_index:
            raise ManifestError(f"caption {record.caption_id} references unknown image {record.image_id}")
        i = image_index[record.image_id]
        caption_to_image.append(i)
        image_to_captions[i].append(j)
        tokens = tokenize(record.text)
        if not tokens:
            raise ManifestError(f"caption {record.caption_id} is empty after tokenization")
        caption_tokens.append(tokens)
    for i, caps in enumerate(image_to_captions):
        if not caps:
            raise ManifestError(f"image {image_ids[i]} has no captions")

    validate_splits(image_ids, manifest["splits"])
    splits = {
        name: [image_index[image_id] for image_id in ids]
        for name, ids in manifest["splits"].items()
    }

    vocabulary = sorted({tok for tokens in caption_tokens for tok in tokens})
    token_index = {tok: k for k, tok in enumerate(vocabulary)}
    caption_indices = [[token_index[tok] for tok in tokens] for tokens in caption_tokens]
    labels = np.vstack([concept_label(tokens, concept_vocab) for tokens in caption_tokens])

    digest = hashlib.sha256()
    for key in ("features", "captions", "corpus", "concept_vocab"):
        digest.update(resolve(key).read_bytes())
    digest.update(json.dumps(manifest, sort_keys=True).encode())

    return Dataset(
        image_ids=image_ids,
        features=features,
        captions=records,
        caption_tokens=caption_tokens,
        caption_indices=caption_indices,
        vocabulary=vocabulary,
        corpus=corpus,
        labels=labels,
        caption_to_image=caption_to_image,
        image_to_captions=image_to_captions,
        splits=splits,
        fingerprint=digest.hexdigest(),
    )


# ---------------------------------------------------------------------------
# synthetic dataset generation


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _make_words(count: int) -> list[str]:
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    words = []
    i = 0
    while len(words) < count:
        first = syllables[i % len(syllables)]
        second = syllables[(i // len(syllables)) % len(syllables)]
        words.append(first + second)
        i += 1
    return words


def generate_synthetic(
    out_dir: str | Path,
    seed: int,
    n_images: int = 160,
    captions_per_image: int = 5,
    latent_dim: int = 16,
    noise_sigma: float = 0.3,
    vocab_size: int = 200,
    regions_per_image: int = 8,
    d_in: int = 64,
    corpus_dim: int = 32,
    n_concepts: int = 16,
    caption_length: int = 8,
    val_fraction: float = 0.0,
    test_fraction: float = 0.2,
) -> Path:
    """Write a complete synthetic dataset and return the manifest path.

    Each image owns a latent unit vector.  Region features are noisy copies
    of the latent lifted into feature space by one fixed random map; caption
    tokens are the words whose latent directions align best with the image,
    so matched pairs are the most similar by construction.  Captions of one
    image share a common core (roughly 70% of tokens) plus per-caption
    extras from the next affinity tier.
    """
    if min(n_images, captions_per_image, latent_dim, vocab_size, caption_length) < 1:
        raise ValueError("all synthetic generation counts must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    words = _make_words(vocab_size)
    word_dirs = rng.standard_normal((vocab_size, latent_dim))
    word_dirs /= np.linalg.norm(word_dirs, axis=1, keepdims=True)
    feature_lift = rng.standard_normal((d_in, latent_dim)) / np.sqrt(latent_dim)
    corpus_lift = rng.standard_normal((corpus_dim, latent_dim)) / np.sqrt(latent_dim)

    core_size = max(1, int(round(0.7 * caption_length)))
    extras = caption_length - core_size
    tier_size = max(caption_length * 2, caption_length + extras)

    image_ids = [f"img{i:04d}" for i in range(n_images)]
    feature_rows = np.empty((n_images * regions_per_image, d_in), dtype=np.float64)
    records: list[CaptionRecord] = []
    word_counts = np.zeros(vocab_size, dtype=np.int64)

    for i in range(n_images):
        latent = rng.standard_normal(latent_dim)
        latent /= np.linalg.norm(latent)
        noise = noise_sigma * rng.standard_normal((regions_per_image, latent_dim))
        feature_rows[i * regions_per_image : (i + 1) * regions_per_image] = (latent + noise) @ feature_lift.T

        affinity = word_dirs @ latent
        ranked = np.argsort(-affinity, kind="stable")
        core = ranked[:core_size]
        tier = ranked[core_size:tier_size]
        for c in range(captions_per_image):
            if extras == 0:
                picks = np.array([], dtype=int)
            elif noise_sigma == 0.0:
                # noiseless data is fully determined by the latent
                picks = tier[:extras]
            else:
                picks = rng.choice(tier, size=extras, replace=False)
            token_ids = sorted(np.concatenate([core, picks]).astype(int), key=lambda w: -affinity[w])
            text = " ".join(words[w] for w in token_ids)
            records.append(CaptionRecord(image_id=image_ids[i], caption_id=f"cap{i:04d}_{c}", text=text))
            word_counts[token_ids] += 1

    # concepts: the globally most frequent words, embedded through their
    # latent directions so the bank genuinely relates to the data
    concept_ids = np.lexsort((np.arange(vocab_size), -word_counts))[:n_concepts]
    concept_vocab = [words[w] for w in concept_ids]
    corpus_vectors = word_dirs[concept_ids] @ corpus_lift.T
    corpus_vectors /= np.linalg.norm(corpus_vectors, axis=1, keepdims=True)

    n_test = int(round(test_fraction * n_images))
    n_val = int(round(val_fraction * n_images))
    n_train = n_images - n_test - n_val
    if n_train < 1:
        raise ValueError("split fractions leave no training images")
    splits = {
        "train": image_ids[:n_train],
        "val": image_ids[n_train : n_train + n_val],
        "test": image_ids[n_train + n_val :],
    }

    save_matrix(out_dir / "features.bin", feature_rows, VERSION_F32)
    save_matrix(out_dir / "corpus.bin", corpus_vectors, VERSION_F32)
    save_captions(out_dir / "captions.tsv", records)
    _atomic_write(out_dir / "concepts.txt", ("\n".join(concept_vocab) + "\n").encode())

    manifest = {
        "features": "features.bin",
        "regions_per_image": regions_per_image,
        "captions": "captions.tsv",
        "corpus": "corpus.bin",
        "concept_vocab": "concepts.txt",
        "image_ids": image_ids,
        "splits": splits,
        "generator": {
            "seed": seed,
            "n_images": n_images,
            "captions_per_image": captions_per_image,
            "latent_dim": latent_dim,
            "noise_sigma": noise_sigma,
            "vocab_size": vocab_size,
            "caption_length": caption_length,
        },
    }
    manifest_path = out_dir / "manifest.json"
    _atomic_write(manifest_path, (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode())
    return manifest_path
