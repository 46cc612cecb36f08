"""Model checkpoints: magic PACC, config hash, named tensors, optimizer state.

The model configuration travels as a key-value text sidecar next to the
binary file; on load the sidecar is re-hashed and must match the hash stored
in the binary, so a checkpoint can never silently attach to the wrong
geometry.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .artifacts import atomic_write
from .autodiff import Tensor
from .errors import InputError
from .model import ModelConfig, SeparationModel
from .optim import AdamW

CHECKPOINT_MAGIC = b"PACC"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb
    head += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + np.ascontiguousarray(arr).tobytes()


def _unpack_array(buf: bytes, off: int, path: Path) -> tuple[str, np.ndarray, int]:
    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise InputError(f"corrupt artifact {path}: truncated")
        piece = buf[off : off + n]
        off += n
        return piece

    (name_len,) = struct.unpack("<H", take(2))
    name = take(name_len).decode("utf-8")
    code, ndim = struct.unpack("<BB", take(2))
    shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
    dtype = _CODE_DTYPES.get(code)
    if dtype is None:
        raise InputError(f"corrupt artifact {path}: unknown dtype code {code}")
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(take(count * dtype.itemsize), dtype=dtype).reshape(shape)
    return name, data.copy(), off


def save_checkpoint(
    path: str | os.PathLike,
    model: SeparationModel,
    optimizer: AdamW | None = None,
    step: int = 0,
) -> None:
    path = Path(path)
    blob = bytearray(CHECKPOINT_MAGIC)
    blob += struct.pack("<QQ", model.config.fingerprint(), step)
    named = list(model.params.items())
    blob += struct.pack("<I", len(named))
    for name, p in named:
        blob += _pack_array(name, p.data)
    blob += struct.pack("<I", len(model.buffers))
    for name, arr in model.buffers.items():
        blob += _pack_array(name, arr)
    if optimizer is None:
        blob += struct.pack("<B", 0)
    else:
        blob += struct.pack("<B", 1)
        blob += struct.pack(
            "<5dQ",
            optimizer.lr,
            optimizer.betas[0],
            optimizer.betas[1],
            optimizer.eps,
            optimizer.weight_decay,
            optimizer.step_count,
        )
        state = optimizer.state_arrays()
        blob += struct.pack("<I", len(state))
        for name, arr in state.items():
            blob += _pack_array(name, arr)
    atomic_write(path, bytes(blob))
    cfg_path = path.with_name(path.name + ".cfg")
    tmp = cfg_path.with_name(cfg_path.name + ".tmp")
    tmp.write_text(model.config.to_text(), encoding="utf-8")
    os.replace(tmp, cfg_path)


def load_checkpoint(
    path: str | os.PathLike,
) -> tuple[SeparationModel, dict, int]:
    """Rebuild a model (and any stored optimizer state) from a PACC file.

    Returns (model, optimizer_state, step) where optimizer_state is an empty
    dict when the checkpoint carries none, otherwise holds hyperparameters,
    the step counter, and the moment arrays.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such checkpoint: {path}")
    cfg_path = path.with_name(path.name + ".cfg")
    if not cfg_path.exists():
        raise InputError(f"checkpoint sidecar missing: {cfg_path}")
    config = ModelConfig.from_text(cfg_path.read_text(encoding="utf-8"))
    buf = path.read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: bad magic, not a PACC file")
    stored_hash, step = struct.unpack("<QQ", buf[4:20])
    if stored_hash != config.fingerprint():
        raise InputError(f"{path}: config hash mismatch against sidecar {cfg_path}")
    off = 20
    (n_params,) = struct.unpack("<I", buf[off : off + 4])
    off += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        name, arr, off = _unpack_array(buf, off, path)
        params[name] = arr
    (n_buffers,) = struct.unpack("<I", buf[off : off + 4])
    off += 4
    buffers: dict[str, np.ndarray] = {}
    for _ in range(n_buffers):
        name, arr, off = _unpack_array(buf, off, path)
        buffers[name] = arr
    (has_opt,) = struct.unpack("<B", buf[off : off + 1])
    off += 1
    opt_state: dict = {}
    if has_opt:
        lr, b1, b2, eps, wd, opt_step = struct.unpack("<5dQ", buf[off : off + 48])
        off += 48
        (n_state,) = struct.unpack("<I", buf[off : off + 4])
        off += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n_state):
            name, arr, off = _unpack_array(buf, off, path)
            arrays[name] = arr
        opt_state = {
            "lr": lr,
            "betas": (b1, b2),
            "eps": eps,
            "weight_decay": wd,
            "step_count": opt_step,
            "arrays": arrays,
        }
    dtype = next(iter(params.values())).dtype if params else np.float32
    model = SeparationModel(config, seed=0, dtype=dtype)
    if set(params) != set(model.params):
        raise InputError(f"{path}: parameter table does not match the architecture")
    for name, arr in params.items():
        model.params[name] = Tensor(arr, requires_grad=True)
    for name, arr in buffers.items():
        if name not in model.buffers:
            raise InputError(f"{path}: unknown buffer {name!r}")
        model.buffers[name] = arr
    return model, opt_state, step


def make_optimizer(model: SeparationModel, opt_state: dict, **defaults) -> AdamW:
    """AdamW wired to the model's parameters, restoring saved state if any."""
    kwargs = dict(defaults)
    for key in ("lr", "betas", "eps", "weight_decay"):
        if key in opt_state:
            kwargs[key] = opt_state[key]
    opt = AdamW(model.params, **kwargs)
    if opt_state.get("arrays"):
        opt.load_state(opt_state["arrays"], int(opt_state["step_count"]))
    return opt
