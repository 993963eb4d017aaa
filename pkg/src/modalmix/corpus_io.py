"""Corpus directory format.

One directory per corpus: a line-delimited manifest (id, frames, profile),
a fingerprint record with the full generator settings, and one binary
tensor file per stored array. Tensor files carry a fixed header:

    magic "UMOD" | version u16 | dtype u8 (0=f32, 1=i64) | rank u8 |
    extents rank*u64 | payload (little-endian)

Feature payloads are float32 on disk; loading promotes them back to the
float64 the pipeline computes in.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .datagen import Corpus, GeneratorConfig, MultimodalUtterance, units_to_transcript

MAGIC = b"UMOD"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<i8"}
_DTYPE_TAGS = {"float32": 0, "float64": 0, "int64": 1}


class CorpusFormatError(ValueError):
    """Malformed corpus file."""


def write_tensor(path, arr: np.ndarray):
    arr = np.asarray(arr)
    tag = _DTYPE_TAGS.get(arr.dtype.name)
    if tag is None:
        raise CorpusFormatError(f"unsupported dtype {arr.dtype} for {path}")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag])
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HBB", VERSION, tag, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(payload.tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CorpusFormatError(f"{path}: bad magic {magic!r}")
        version, tag, rank = struct.unpack("<HBB", f.read(4))
        if version != VERSION:
            raise CorpusFormatError(f"{path}: unsupported version {version}")
        if tag not in _DTYPES:
            raise CorpusFormatError(f"{path}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
        data = np.frombuffer(f.read(), dtype=_DTYPES[tag]).reshape(shape)
    if tag == 0:
        return data.astype(np.float64)
    return data.astype(np.int64)


def write_corpus(corpus: Corpus, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "manifest.jsonl", "w") as f:
        for utt in corpus.utterances:
            f.write(json.dumps({"id": utt.id, "frames": utt.frames, "profile": utt.profile}) + "\n")
    cfg = corpus.config
    record = {
        "fingerprint": corpus.fingerprint,
        "config": {
            "n_units": cfg.n_units, "n_visemes": cfg.n_visemes,
            "dim_a": cfg.dim_a, "dim_b": cfg.dim_b,
            "mean_dwell": cfg.mean_dwell, "sigma_a": cfg.sigma_a, "sigma_b": cfg.sigma_b,
            "min_len": cfg.min_len, "max_len": cfg.max_len,
            "latent_dim": cfg.latent_dim, "seed": cfg.seed,
        },
    }
    with open(directory / "fingerprint.json", "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
    write_tensor(directory / "transition.umod", cfg.transition.astype(np.float64))
    for utt in corpus.utterances:
        if utt.features_a is not None:
            write_tensor(directory / f"{utt.id}.a.umod", utt.features_a.astype(np.float32))
        if utt.features_b is not None:
            write_tensor(directory / f"{utt.id}.b.umod", utt.features_b.astype(np.float32))
        write_tensor(directory / f"{utt.id}.units.umod", utt.unit_labels)


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    with open(directory / "fingerprint.json") as f:
        record = json.load(f)
    transition = read_tensor(directory / "transition.umod")
    config = GeneratorConfig(transition=transition, **record["config"])
    utts = []
    with open(directory / "manifest.jsonl") as f:
        for line in f:
            entry = json.loads(line)
            uid, profile = entry["id"], entry["profile"]
            units = read_tensor(directory / f"{uid}.units.umod")
            if len(units) != entry["frames"]:
                raise CorpusFormatError(f"{uid}: manifest frames {entry['frames']} != stored {len(units)}")
            feats_a = read_tensor(directory / f"{uid}.a.umod") if "a" in profile else None
            feats_b = read_tensor(directory / f"{uid}.b.umod") if "b" in profile else None
            utts.append(MultimodalUtterance(
                id=uid, features_a=feats_a, features_b=feats_b,
                unit_labels=units, transcript=units_to_transcript(units), profile=profile,
            ))
    corpus = Corpus(utterances=utts, config=config, fingerprint=record["fingerprint"])
    return corpus
