"""Checkpoint files.

Layout::

    SPACCKPT <schema>\\n
    <header byte length> <sha256 of header + blob>\\n
    <header: canonical JSON with the tensor directory and metadata>
    <blob: little-endian float32 values>

The tensor directory lists ``name``, ``shape`` and byte ``offset`` into the
blob for every tensor, in file order. Keys are written sorted so a save of a
loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
from collections import OrderedDict
from typing import Mapping

import numpy as np
import torch

from .agent import SPACAgent, Trainer, Transition, TrainConfig
from .env import EpisodeState, State
from .warp import compose_fields, grid_sample_bilinear

MAGIC = b"SPACCKPT"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint or does not match expectations."""


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor], meta: dict) -> None:
    directory = []
    chunks = []
    offset = 0
    for name, t in tensors.items():
        arr = np.array(t.detach().cpu().numpy(), dtype="<f4", order="C")  # keeps 0-d shapes
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    header = json.dumps(
        {"schema": SCHEMA_VERSION, "tensors": directory, "blob_bytes": offset, "meta": meta},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    digest = hashlib.sha256(header + blob).hexdigest()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + b" " + str(SCHEMA_VERSION).encode() + b"\n")
        fh.write(f"{len(header)} {digest}\n".encode("ascii"))
        fh.write(header)
        fh.write(blob)
    os.replace(tmp, path)


def read_header(path: str | os.PathLike) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    first, _, rest = raw.partition(b"\n")
    parts = first.split(b" ")
    if len(parts) != 2 or parts[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version = int(parts[1])
    except ValueError:
        raise CheckpointError(f"{path}: unreadable schema version {parts[1]!r}") from None
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
    second, _, rest = rest.partition(b"\n")
    try:
        n_header, digest = second.decode("ascii").split(" ")
        n_header = int(n_header)
    except ValueError:
        raise CheckpointError(f"{path}: malformed length/digest line") from None
    header_raw, blob = rest[:n_header], rest[n_header:]
    if hashlib.sha256(header_raw + blob).hexdigest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    header = json.loads(header_raw)
    if header.get("schema") != version:
        raise CheckpointError(f"{path}: header schema {header.get('schema')} disagrees with file version {version}")
    if header["blob_bytes"] != len(blob):
        raise CheckpointError(f"{path}: blob holds {len(blob)} bytes, header says {header['blob_bytes']}")
    return header, blob


def load_checkpoint(
    path: str | os.PathLike, expected_shapes: Mapping[str, tuple] | None = None
) -> tuple[OrderedDict[str, torch.Tensor], dict]:
    header, blob = read_header(path)
    tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"]).reshape(shape)
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    if expected_shapes is not None:
        problems = shape_diff(expected_shapes, {n: tuple(t.shape) for n, t in tensors.items()})
        if problems:
            raise CheckpointError(f"{path}: checkpoint does not match the model:\n  " + "\n  ".join(problems))
    return tensors, header["meta"]


def shape_diff(expected: Mapping[str, tuple], found: Mapping[str, tuple]) -> list[str]:
    out = []
    for name, shape in expected.items():
        if name not in found:
            out.append(f"missing tensor {name} {tuple(shape)}")
        elif tuple(found[name]) != tuple(shape):
            out.append(f"{name}: expected {tuple(shape)}, found {tuple(found[name])}")
    for name in found:
        if name not in expected:
            out.append(f"unexpected tensor {name} {tuple(found[name])}")
    return out


# ------------------------------------------------------------------- agent state


def _rng_state(gen: torch.Generator) -> str:
    return base64.b64encode(gen.get_state().numpy().tobytes()).decode("ascii")


def _set_rng_state(gen: torch.Generator, text: str) -> None:
    gen.set_state(torch.from_numpy(np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy()))


def model_tensors(agent: SPACAgent) -> OrderedDict[str, torch.Tensor]:
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for prefix, params in (
        ("planner", agent.planner_params),
        ("actor", agent.actor_params),
        ("critic", agent.critic_params),
        ("target", agent.target_params),
    ):
        for n, t in params.items():
            out[f"{prefix}.{n}"] = t
    out["temperature.log_alpha"] = agent.temperature.log_alpha
    return out


def model_shapes(agent: SPACAgent) -> dict[str, tuple]:
    return {n: tuple(t.shape) for n, t in model_tensors(agent).items()}


def agent_state(agent: SPACAgent) -> tuple[OrderedDict[str, torch.Tensor], dict]:
    tensors = model_tensors(agent)
    opt_steps = {}
    for name, opt in (
        ("critic", agent.opt_critic),
        ("planner", agent.opt_planner),
        ("actor", agent.opt_actor),
        ("alpha", agent.opt_alpha),
    ):
        for n, t in opt.tensors().items():
            tensors[f"opt.{name}.{n}"] = t
        opt_steps[name] = opt.step_count

    pool = list(agent.pool.items)
    if pool:
        tensors["pool.plan"] = torch.stack([t.plan for t in pool])
        tensors["pool.action"] = torch.stack([t.action for t in pool])
        tensors["pool.omega_prev"] = torch.stack([t.omega_prev for t in pool])
    meta = {
        "config": agent.config.__dict__.copy(),
        "opt_steps": opt_steps,
        "updates": agent.updates,
        "noise_rng": _rng_state(agent.noise),
        "pool": {
            "inserted": agent.pool.inserted,
            "rng": agent.pool.rng.bit_generator.state,
            "rewards": [t.reward for t in pool],
            "dones": [bool(t.done) for t in pool],
            "tags": [t.tag for t in pool],
        },
    }
    return tensors, meta


def restore_agent(agent: SPACAgent, tensors: Mapping[str, torch.Tensor], meta: dict, pairs=None) -> None:
    for name, t in model_tensors(agent).items():
        with torch.no_grad():
            t.copy_(tensors[name].reshape(t.shape))
    for name, opt in (
        ("critic", agent.opt_critic),
        ("planner", agent.opt_planner),
        ("actor", agent.opt_actor),
        ("alpha", agent.opt_alpha),
    ):
        opt.load_tensors({n[len(f"opt.{name}.") :]: t for n, t in tensors.items() if n.startswith(f"opt.{name}.")})
        opt.step_count = meta["opt_steps"][name]
    agent.updates = meta["updates"]
    _set_rng_state(agent.noise, meta["noise_rng"])

    pm = meta["pool"]
    agent.pool.items.clear()
    agent.pool.inserted = pm["inserted"]
    agent.pool.rng.bit_generator.state = pm["rng"]
    if pm["rewards"]:
        if pairs is None:
            raise CheckpointError("checkpoint holds replay data; the training pairs are needed to rebuild it")
        plans = tensors["pool.plan"]
        actions = tensors["pool.action"]
        omegas = tensors["pool.omega_prev"]
        for i, (reward, done, tag) in enumerate(zip(pm["rewards"], pm["dones"], pm["tags"])):
            fixed, moving = pairs[tag]
            omega_prev = omegas[i].clone()
            omega = compose_fields(actions[i], omega_prev)
            agent.pool.items.append(
                Transition(
                    State(fixed, grid_sample_bilinear(moving, omega_prev)),
                    plans[i].clone(),
                    actions[i].clone(),
                    reward,
                    State(fixed, grid_sample_bilinear(moving, omega)),
                    done,
                    moving,
                    omega_prev,
                    tag,
                )
            )


def trainer_state(trainer: Trainer, extra: dict | None = None) -> tuple[OrderedDict[str, torch.Tensor], dict]:
    tensors, meta = agent_state(trainer.agent)
    meta["global_step"] = trainer.global_step
    meta["pair_rng"] = trainer.pair_rng.bit_generator.state
    ep = trainer.episode
    if ep is None:
        meta["episode"] = None
    else:
        tensors["episode.omega"] = ep.omega
        tensors["episode.seg_fixed"] = ep.seg_fixed.to(torch.float32)
        tensors["episode.seg_moving"] = ep.seg_moving.to(torch.float32)
        meta["episode"] = {
            "tag": ep.tag,
            "t": ep.t,
            "horizon": ep.horizon,
            "prev_dice": ep.prev_dice,
            "initial_dice": ep.initial_dice,
            "dice_history": list(ep.dice_history),
        }
    if extra:
        meta.update(extra)
    return tensors, meta


def restore_trainer(trainer: Trainer, tensors: Mapping[str, torch.Tensor], meta: dict) -> None:
    restore_agent(trainer.agent, tensors, meta, trainer.pairs)
    trainer.global_step = meta["global_step"]
    trainer.pair_rng.bit_generator.state = meta["pair_rng"]
    em = meta["episode"]
    if em is None:
        trainer.episode = None
        trainer.pair_index = -1
        return
    fixed, moving = trainer.pairs[em["tag"]]
    trainer.pair_index = em["tag"]
    trainer.episode = EpisodeState(
        fixed=fixed,
        moving=moving,
        omega=tensors["episode.omega"].clone(),
        t=em["t"],
        horizon=em["horizon"],
        seg_fixed=tensors["episode.seg_fixed"].long(),
        seg_moving=tensors["episode.seg_moving"].long(),
        prev_dice=em["prev_dice"],
        initial_dice=em["initial_dice"],
        dice_history=list(em["dice_history"]),
        tag=em["tag"],
    )


def config_from_meta(meta: dict) -> TrainConfig:
    return TrainConfig(**meta["config"])
