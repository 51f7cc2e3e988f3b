"""Checkpoint container for model parameters and optimizer state.

Layout (integers little-endian):
    4 bytes  magic ``RDCK``
    u32      format version
    u32      descriptor length, then that many bytes of JSON (architecture,
             optimizer hyperparameters, free-form metadata)
    u32      tensor count, then per tensor: u32 name length, name bytes,
             one RDT1 blob

Round-trips are bit-exact: float64 payloads are written verbatim.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Adam
from .models import ArchSpec, Model
from .tensorio import FormatError, dump_tensor, load_tensor

MAGIC = b"RDCK"
VERSION = 1


@dataclass
class Checkpoint:
    arch: ArchSpec
    tensors: dict
    optimizer: dict | None
    meta: dict

    def build_model(self) -> Model:
        model = Model(self.arch)
        model.load_state(self.tensors)
        return model

    def build_adam(self, params: dict) -> Adam:
        """Reconstruct the optimizer against a freshly built model's params.

        Only the parameters the optimizer actually covered are restored
        (frozen sub-networks carry no moment state).
        """
        if self.optimizer is None:
            raise FormatError("checkpoint carries no optimizer state")
        names = self.optimizer["param_names"]
        missing = [n for n in names if n not in params]
        if missing:
            raise FormatError(f"optimizer state references unknown parameters {missing}")
        opt = Adam(
            [params[n] for n in names],
            learning_rate=self.optimizer["learning_rate"],
            beta1=self.optimizer["beta1"],
            beta2=self.optimizer["beta2"],
            epsilon=self.optimizer["epsilon"],
        )
        opt.state.step_count = int(self.optimizer["step_count"])
        for i, name in enumerate(names):
            m = self.tensors[f"adam.m.{name}"]
            v = self.tensors[f"adam.v.{name}"]
            if m.shape != opt.params[i].data.shape:
                raise FormatError(
                    f"adam moment for {name} has shape {m.shape}, "
                    f"parameter has {opt.params[i].data.shape}"
                )
            opt.state.first_moment[i] = m
            opt.state.second_moment[i] = v
        return opt


def save_checkpoint(path, model: Model, adam: Adam | None = None,
                    meta: dict | None = None):
    """Write model parameters (and optionally Adam state) to `path`."""
    params = model.parameters()
    tensors = {name: p.data for name, p in params.items()}
    optimizer = None
    if adam is not None:
        st = adam.state
        name_by_id = {id(p): name for name, p in params.items()}
        param_names = []
        for i, p in enumerate(adam.params):
            name = name_by_id.get(id(p))
            if name is None:
                raise FormatError("optimizer tracks a tensor that is not a model parameter")
            param_names.append(name)
            tensors[f"adam.m.{name}"] = st.first_moment[i]
            tensors[f"adam.v.{name}"] = st.second_moment[i]
        optimizer = {
            "learning_rate": st.learning_rate,
            "beta1": st.beta1,
            "beta2": st.beta2,
            "epsilon": st.epsilon,
            "step_count": st.step_count,
            "param_names": param_names,
        }
    desc = {
        "arch": model.arch.to_dict(),
        "optimizer": optimizer,
        "meta": meta or {},
    }
    desc_bytes = json.dumps(desc, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<I", VERSION),
           struct.pack("<I", len(desc_bytes)), desc_bytes,
           struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(dump_tensor(arr))
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path, expected_arch: ArchSpec | None = None) -> Checkpoint:
    """Read a checkpoint; verify magic, version and (optionally) architecture.

    Raises:
        FormatError: wrong magic, a version other than the supported one,
            a truncated stream, or a descriptor that does not match
            `expected_arch`.
    """
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(
            f"{path}: checkpoint format version {version}, this build reads {VERSION}"
        )
    (dlen,) = struct.unpack_from("<I", buf, 8)
    desc = json.loads(buf[12 : 12 + dlen].decode())
    offset = 12 + dlen
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, offset)
            offset += 4
            name = buf[offset : offset + nlen].decode()
            offset += nlen
            tensors[name], offset = load_tensor(buf, offset)
    except struct.error as e:
        raise FormatError(f"{path}: truncated checkpoint") from e
    arch = ArchSpec.from_dict(desc["arch"])
    if expected_arch is not None and arch != expected_arch:
        raise FormatError(
            f"{path}: architecture mismatch: checkpoint has {arch}, "
            f"caller expects {expected_arch}"
        )
    return Checkpoint(arch=arch, tensors=tensors,
                      optimizer=desc.get("optimizer"), meta=desc.get("meta", {}))
