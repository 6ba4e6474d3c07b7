"""Bit-exact binary serialization for FP32 and quantized models.

Single-file `.qat` artifacts, little-endian throughout:

    bytes 0-3    magic b"QAT1"
    byte  4      format version (currently 1)
    bytes 5-8    header length, uint32 LE
    header       UTF-8 JSON: kind, model config, tensor directory,
                 tracker state (qat) or frozen input scales (int8-frozen)
    payload      raw tensor bytes, contiguous, in directory order

The tensor directory is sorted by name and serialization is fully
deterministic: the same model always produces the same bytes. See
docs/format.md for the byte-level reference.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import ModelConfig, TransformerEncoderModel
from .quant import EmaTracker
from .runtime import (
    DynamicQuantLinear,
    DynamicQuantModel,
    InferenceBlock,
    QuantizedEmbeddingFrozen,
    QuantizedLinearFrozen,
    QuantizedModelFrozen,
)

MAGIC = b"QAT1"
VERSION = 1

KIND_FP32 = "fp32"
KIND_QAT = "qat"
KIND_FROZEN = "int8-frozen"
KIND_DYNAMIC = "int8-dynamic"

_DTYPES = {"f32": np.dtype("<f4"), "i8": np.dtype("i1"), "i32": np.dtype("<i4")}


class FormatError(ValueError):
    """The byte stream is not a valid artifact."""


def _f32(x) -> float:
    return float(np.float32(x))


def _config_dict(config: ModelConfig) -> dict:
    return {
        "vocab_size": config.vocab_size,
        "max_seq_len": config.max_seq_len,
        "num_classes": config.num_classes,
        "dim": config.dim,
        "num_heads": config.num_heads,
        "ffn_dim": config.ffn_dim,
        "num_layers": config.num_layers,
        "bits": config.bits,
        "ema_decay": config.ema_decay,
    }


def artifact_kind(model) -> str:
    if isinstance(model, TransformerEncoderModel):
        return KIND_QAT if model.quant_enabled else KIND_FP32
    if isinstance(model, QuantizedModelFrozen):
        return KIND_FROZEN
    if isinstance(model, DynamicQuantModel):
        return KIND_DYNAMIC
    raise TypeError(f"cannot serialize object of type {type(model).__name__}")


# ---------------------------------------------------------------------------
# Tensor collection per artifact kind
# ---------------------------------------------------------------------------


def _collect_training_model(model: TransformerEncoderModel):
    tensors = {name: ("f32", p.value, None) for name, p in model.parameters().items()}
    extra = {}
    if model.quant_enabled:
        extra["trackers"] = {
            name: {
                "decay": layer.input_tracker.decay,
                "running_max": _f32(layer.input_tracker.running_max),
                "initialized": layer.input_tracker.initialized,
            }
            for name, layer in model.named_qlinears()
        }
    return tensors, extra


def _iter_inference_fcs(model):
    blocks = {}
    for i, blk in enumerate(model.blocks):
        blocks[f"blocks.{i}.attn.q_proj"] = blk.attn_q
        blocks[f"blocks.{i}.attn.k_proj"] = blk.attn_k
        blocks[f"blocks.{i}.attn.v_proj"] = blk.attn_v
        blocks[f"blocks.{i}.attn.out_proj"] = blk.attn_out
        blocks[f"blocks.{i}.fc_expand"] = blk.fc_expand
        blocks[f"blocks.{i}.fc_reduce"] = blk.fc_reduce
    blocks["classifier"] = model.classifier
    return blocks


def _iter_inference_norms(model):
    norms = {"emb_norm": (model.emb_norm_gain, model.emb_norm_bias)}
    for i, blk in enumerate(model.blocks):
        norms[f"blocks.{i}.norm_attn"] = (blk.norm_attn_gain, blk.norm_attn_bias)
        norms[f"blocks.{i}.norm_ffn"] = (blk.norm_ffn_gain, blk.norm_ffn_bias)
    return norms


def _collect_integer_model(model):
    frozen = isinstance(model, QuantizedModelFrozen)
    tensors = {
        "token_emb.table_q": ("i8", model.token_emb.table_q, _f32(model.token_emb.scale)),
        "pos_emb.table_q": ("i8", model.pos_emb.table_q, _f32(model.pos_emb.scale)),
    }
    for name, (gain, bias) in _iter_inference_norms(model).items():
        tensors[f"{name}.gain"] = ("f32", gain, None)
        tensors[f"{name}.bias"] = ("f32", bias, None)
    input_scales = {}
    for name, fc in _iter_inference_fcs(model).items():
        tensors[f"{name}.weight_q"] = ("i8", fc.weight_q, _f32(fc.weight_scale))
        if frozen:
            tensors[f"{name}.bias_q"] = ("i32", fc.bias_q, None)
            input_scales[name] = _f32(fc.input_scale)
        else:
            tensors[f"{name}.bias"] = ("f32", fc.bias, None)
    extra = {"input_scales": input_scales} if frozen else {}
    return tensors, extra


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def serialize(model) -> bytes:
    """Serialize a model to deterministic artifact bytes."""
    kind = artifact_kind(model)
    if kind in (KIND_FP32, KIND_QAT):
        tensors, extra = _collect_training_model(model)
    else:
        tensors, extra = _collect_integer_model(model)

    directory = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        dtype, array, scale = tensors[name]
        raw = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes()
        entry = {"name": name, "dtype": dtype, "shape": list(array.shape),
                 "offset": offset}
        if scale is not None:
            entry["scale"] = scale
        directory.append(entry)
        chunks.append(raw)
        offset += len(raw)

    header = {"kind": kind, "config": _config_dict(model.config),
              "tensors": directory, **extra}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return b"".join(
        [MAGIC, bytes([VERSION]), struct.pack("<I", len(header_bytes)), header_bytes]
        + chunks
    )


# ---------------------------------------------------------------------------
# Deserialization
# ---------------------------------------------------------------------------


def _parse_container(data: bytes):
    if len(data) < 9:
        raise FormatError(f"truncated artifact: {len(data)} bytes, need at least 9")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r} at byte 0, expected {MAGIC!r}")
    if data[4] != VERSION:
        raise FormatError(f"unsupported format version {data[4]} at byte 4")
    (header_len,) = struct.unpack("<I", data[5:9])
    if 9 + header_len > len(data):
        raise FormatError(
            f"header length {header_len} at byte 5 exceeds file size {len(data)}"
        )
    try:
        header = json.loads(data[9 : 9 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header JSON: {exc}") from exc
    return header, data[9 + header_len :]


def _validate_directory(directory, payload_len: int):
    expected_offset = 0
    for entry in directory:
        for key in ("name", "dtype", "shape", "offset"):
            if key not in entry:
                raise FormatError(f"tensor entry missing key {key!r}: {entry}")
        if entry["dtype"] not in _DTYPES:
            raise FormatError(f"unknown dtype {entry['dtype']!r} for {entry['name']}")
        nbytes = int(np.prod(entry["shape"], dtype=np.int64)) * _DTYPES[entry["dtype"]].itemsize
        if entry["offset"] != expected_offset:
            raise FormatError(
                f"tensor {entry['name']}: offset {entry['offset']} overlaps or leaves "
                f"a gap (expected {expected_offset})"
            )
        expected_offset += nbytes
    if expected_offset != payload_len:
        raise FormatError(
            f"payload length {payload_len} does not match directory total {expected_offset}"
        )


def _read_tensors(header, payload) -> dict[str, tuple[np.ndarray, float | None]]:
    directory = header.get("tensors")
    if not isinstance(directory, list):
        raise FormatError("header has no tensor directory")
    _validate_directory(directory, len(payload))
    out = {}
    for entry in directory:
        dtype = _DTYPES[entry["dtype"]]
        nbytes = int(np.prod(entry["shape"], dtype=np.int64)) * dtype.itemsize
        raw = payload[entry["offset"] : entry["offset"] + nbytes]
        array = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
        if entry["dtype"] == "f32" and not np.isfinite(array).all():
            raise FormatError(f"tensor {entry['name']} contains non-finite values")
        out[entry["name"]] = (array, entry.get("scale"))
    return out


def _require(tensors, name):
    if name not in tensors:
        raise FormatError(f"artifact is missing tensor {name!r}")
    return tensors[name]


def _config_from_header(header) -> ModelConfig:
    try:
        return ModelConfig(**header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid model config in header: {exc}") from exc


def _restore_training_model(header, tensors, quant_enabled) -> TransformerEncoderModel:
    config = _config_from_header(header)
    model = TransformerEncoderModel(config, quant_enabled=quant_enabled, seed=0)
    params = model.parameters()
    names = set(params)
    present = set(tensors)
    if names != present:
        missing, extra = names - present, present - names
        raise FormatError(f"tensor set mismatch: missing {sorted(missing)}, "
                          f"unexpected {sorted(extra)}")
    for name, param in params.items():
        array, _ = tensors[name]
        if tuple(array.shape) != param.value.shape:
            raise FormatError(f"tensor {name}: shape {array.shape} does not match "
                              f"model shape {param.value.shape}")
        param.value = array.astype(np.float32)
        param.grad = np.zeros_like(param.value)
    if quant_enabled:
        trackers = header.get("trackers", {})
        for name, layer in model.named_qlinears():
            if name not in trackers:
                raise FormatError(f"artifact is missing tracker state for {name!r}")
            state = trackers[name]
            layer.input_tracker = EmaTracker(
                decay=float(state["decay"]),
                running_max=float(np.float32(state["running_max"])),
                initialized=bool(state["initialized"]),
            )
    return model


def _restore_integer_model(header, tensors, kind):
    config = _config_from_header(header)
    frozen = kind == KIND_FROZEN
    input_scales = header.get("input_scales", {})

    def embedding(name):
        array, scale = _require(tensors, f"{name}.table_q")
        if scale is None:
            raise FormatError(f"{name}.table_q has no scale")
        return QuantizedEmbeddingFrozen(table_q=array, scale=np.float32(scale))

    def norm(name):
        gain, _ = _require(tensors, f"{name}.gain")
        bias, _ = _require(tensors, f"{name}.bias")
        return gain, bias

    def fc(name):
        weight_q, scale = _require(tensors, f"{name}.weight_q")
        if scale is None:
            raise FormatError(f"{name}.weight_q has no scale")
        if frozen:
            if name not in input_scales:
                raise FormatError(f"artifact is missing input scale for {name!r}")
            bias_q, _ = _require(tensors, f"{name}.bias_q")
            return QuantizedLinearFrozen(
                weight_q=weight_q, weight_scale=np.float32(scale),
                input_scale=np.float32(input_scales[name]), bias_q=bias_q,
            )
        bias, _ = _require(tensors, f"{name}.bias")
        return DynamicQuantLinear(weight_q=weight_q, weight_scale=np.float32(scale),
                                  bias=bias)

    blocks = []
    for i in range(config.num_layers):
        na_gain, na_bias = norm(f"blocks.{i}.norm_attn")
        nf_gain, nf_bias = norm(f"blocks.{i}.norm_ffn")
        blocks.append(InferenceBlock(
            attn_q=fc(f"blocks.{i}.attn.q_proj"),
            attn_k=fc(f"blocks.{i}.attn.k_proj"),
            attn_v=fc(f"blocks.{i}.attn.v_proj"),
            attn_out=fc(f"blocks.{i}.attn.out_proj"),
            norm_attn_gain=na_gain, norm_attn_bias=na_bias,
            fc_expand=fc(f"blocks.{i}.fc_expand"),
            fc_reduce=fc(f"blocks.{i}.fc_reduce"),
            norm_ffn_gain=nf_gain, norm_ffn_bias=nf_bias,
        ))
    emb_gain, emb_bias = norm("emb_norm")
    model_cls = QuantizedModelFrozen if frozen else DynamicQuantModel
    return model_cls(
        config=config,
        token_emb=embedding("token_emb"),
        pos_emb=embedding("pos_emb"),
        emb_norm_gain=emb_gain,
        emb_norm_bias=emb_bias,
        blocks=blocks,
        classifier=fc("classifier"),
    )


def deserialize(data: bytes):
    """Reconstruct a model from artifact bytes. Raises FormatError on damage."""
    header, payload = _parse_container(data)
    kind = header.get("kind")
    tensors = _read_tensors(header, payload)
    if kind in (KIND_FP32, KIND_QAT):
        return _restore_training_model(header, tensors, quant_enabled=(kind == KIND_QAT))
    if kind in (KIND_FROZEN, KIND_DYNAMIC):
        return _restore_integer_model(header, tensors, kind)
    raise FormatError(f"unknown artifact kind {kind!r}")


def save_artifact(model, path) -> bytes:
    data = serialize(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_artifact(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def inspect_header(data: bytes) -> dict:
    """Header plus size accounting, for the CLI `inspect` command."""
    header, payload = _parse_container(data)
    _validate_directory(header.get("tensors", []), len(payload))
    by_dtype: dict[str, int] = {}
    for entry in header["tensors"]:
        nbytes = int(np.prod(entry["shape"], dtype=np.int64)) * _DTYPES[entry["dtype"]].itemsize
        by_dtype[entry["dtype"]] = by_dtype.get(entry["dtype"], 0) + nbytes
    return {
        "kind": header["kind"],
        "config": header["config"],
        "num_tensors": len(header["tensors"]),
        "payload_bytes": len(payload),
        "payload_bytes_by_dtype": by_dtype,
        "total_bytes": 9 + len(json.dumps(header, sort_keys=True,
                                          separators=(",", ":")).encode()) + len(payload),
    }
