"""Checkpoint container: JSON header (config, vocabulary hashes, speaker
table, format version) followed by named tensors as little-endian float32
arrays with shape prefixes. Loading refuses mismatched vocabularies."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import DataError, SpeakerTable, Vocabulary
from .model import ModelConfig, Seq2SeqModel

MAGIC = b"SPKNMT\x00\x01"
FORMAT_VERSION = 1


def save_checkpoint(
    path,
    model: Seq2SeqModel,
    src_vocab: Vocabulary,
    trg_vocab: Vocabulary,
    speakers: SpeakerTable,
    run_config: dict | None = None,
):
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.as_dict(),
        "mode": model.config.mode,
        "src_vocab_hash": src_vocab.content_hash(),
        "trg_vocab_hash": trg_vocab.content_hash(),
        "speakers": speakers.speakers,
        "run_config": run_config or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        tensors = model.named_parameters()
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            data = tensors[name].data.astype("<f4")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def _read_header(fh, path) -> dict:
    if fh.read(len(MAGIC)) != MAGIC:
        raise DataError(f"{path} is not a checkpoint file")
    (length,) = struct.unpack("<I", fh.read(4))
    return json.loads(fh.read(length).decode("utf-8"))


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_tensors(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", fh.read(4))
        name = fh.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        n_bytes = 4 * int(np.prod(shape)) if ndim else 4
        raw = fh.read(n_bytes)
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return out


def load_checkpoint(
    path,
    src_vocab: Vocabulary,
    trg_vocab: Vocabulary,
) -> tuple[Seq2SeqModel, dict]:
    """Rebuild the model, verifying the vocabularies match the ones the
    checkpoint was trained with."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        if header["format_version"] != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint format {header['format_version']}")
        if header["src_vocab_hash"] != src_vocab.content_hash():
            raise DataError("source vocabulary does not match the checkpoint")
        if header["trg_vocab_hash"] != trg_vocab.content_hash():
            raise DataError("target vocabulary does not match the checkpoint")
        values = _read_tensors(fh)
    model = Seq2SeqModel(ModelConfig.from_dict(header["config"]))
    model.load_state_values({k: v.astype(model.params[k].data.dtype) for k, v in values.items()})
    return model, header


def checkpoint_speakers(path) -> SpeakerTable:
    return SpeakerTable(read_header(path)["speakers"])
