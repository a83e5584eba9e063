"""Binary model checkpoints.

Layout (all integers little-endian u32, all floats little-endian f64):

    "FTCP" | version | config byte length | config text (UTF-8)
    | tensor count | per tensor: name length, name, ndim, dims..., data

Tensors are written in lexicographic name order, so two models with equal
parameters serialize to byte-identical files.  The config text is carried
verbatim and parsed on load to recover the head kind and block layout.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .encoder import BlockParams, EncoderConfig, EncoderState
from .errors import FormatError, LengthError, VersionError
from .ft import FTParams
from .heads import RelationHeadState
from .training import ModelState

CHECKPOINT_MAGIC = b"FTCP"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: ModelState, config_text: str, path: str) -> None:
    store = model.param_store()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        payload = config_text.encode("utf-8")
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", len(store)))
        for name, tensor in store.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", tensor.ndim))
            for dim in tensor.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def _read_exact(fh: io.BufferedReader, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise LengthError(f"checkpoint truncated while reading {what}")
    return data


def read_checkpoint(path: str) -> tuple[ParamStore, str]:
    """Raw parameters and config text, without model reconstruction."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"checkpoint has bad magic {magic!r}")
        version, config_len = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version > CHECKPOINT_VERSION:
            raise VersionError(f"checkpoint version {version} not supported")
        config_text = _read_exact(fh, config_len, "config text").decode("utf-8")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        store = ParamStore()
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = [
                struct.unpack("<I", _read_exact(fh, 4, "dimension"))[0]
                for _ in range(ndim)
            ]
            n_values = int(np.prod(dims, dtype=np.int64)) if dims else 1
            payload = _read_exact(fh, 8 * n_values, f"tensor {name}")
            data = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
            store.add(name, ad.leaf(data))
        trailing = fh.read(1)
        if trailing:
            raise FormatError("checkpoint has trailing bytes after the last tensor")
    return store, config_text


def model_from_store(store: ParamStore, head_kind: str) -> ModelState:
    """Rebuild a model from named tensors; layout is implied by the names."""
    block_ids = sorted(
        {int(n.split(".")[1][len("block"):]) for n in store.names() if n.startswith("enc.block")}
    )
    if block_ids != list(range(len(block_ids))) or not block_ids:
        raise FormatError("checkpoint encoder blocks are not a contiguous range")
    blocks = []
    for i in block_ids:
        try:
            blocks.append(BlockParams(
                store[f"enc.block{i}.weight"],
                store[f"enc.block{i}.bias"],
                store[f"enc.block{i}.bn_scale"],
                store[f"enc.block{i}.bn_shift"],
            ))
        except KeyError as err:
            raise FormatError(f"checkpoint is missing encoder tensor {err}") from None
    input_dim = blocks[0].weight.shape[0]
    widths = tuple(b.weight.shape[1] for b in blocks)
    ft_flags = tuple(f"ft.block{i}.gamma" in store for i in block_ids)
    has_ft = any(ft_flags)
    config = EncoderConfig(input_dim, widths, ft_flags if has_ft else ())
    encoder = EncoderState(config, blocks)

    head = None
    if "head.rel.w1" in store:
        try:
            head = RelationHeadState(
                store["head.rel.w1"], store["head.rel.b1"],
                store["head.rel.w2"], store["head.rel.b2"],
            )
        except KeyError as err:
            raise FormatError(f"checkpoint is missing relation tensor {err}") from None

    ft = None
    if has_ft:
        gammas, betas = [], []
        for i, on in enumerate(ft_flags):
            if not on:
                continue
            try:
                gammas.append(store[f"ft.block{i}.gamma"])
                betas.append(store[f"ft.block{i}.beta"])
            except KeyError as err:
                raise FormatError(f"checkpoint is missing modulation tensor {err}") from None
        ft = FTParams(gammas, betas)
    return ModelState(head_kind, encoder, head, ft)


def load_checkpoint(path: str) -> tuple[ModelState, str]:
    """Read a checkpoint and rebuild the model it describes."""
    from .config import parse_config_text

    store, config_text = read_checkpoint(path)
    head_kind = "relation" if "head.rel.w1" in store else "proto"
    try:
        head_kind = parse_config_text(config_text).head
    except Exception:
        pass  # fall back to the structural guess for foreign config text
    return model_from_store(store, head_kind), config_text
