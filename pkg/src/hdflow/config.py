"""Run configuration: every module config in one dataclass, stored as a commented INI file."""

from __future__ import annotations

import configparser
import io
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace

from .diffusion import GuidanceConfig
from .flow import FlowConfig
from .maze import MazeSpec
from .planner import PlannerConfig
from .world_model import WorldModelConfig


@dataclass
class DataConfig:
    n_success: int = 100
    n_fail: int = 50
    seed: int = 0


@dataclass
class ScheduleConfig:
    L: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class SeedConfig:
    world_model: int = 1
    planner: int = 2
    eval: int = 3
    episodes: int = 100
    out_dir: str = "runs"


@dataclass
class RunConfig:
    maze: MazeSpec = field(default_factory=MazeSpec)
    data: DataConfig = field(default_factory=DataConfig)
    world_model: WorldModelConfig = field(default_factory=WorldModelConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)


# unit notes written next to keys; keys are "section.name"
UNITS = {
    "maze.layout": "rows top to bottom, comma separated; S start, G goal, # wall",
    "maze.cell_size": "world units per cell",
    "maze.goal_radius": "world units",
    "maze.max_episode_length": "env steps",
    "data.n_success": "episodes",
    "data.n_fail": "episodes",
    "world_model.obs_scale": "multiplier on centred observations",
    "world_model.kl_free_nats": "nats per step",
    "world_model.anchor_stride": "env steps between contrastive anchors",
    "world_model.epochs": "passes over the dataset",
    "world_model.batch_size": "sequences",
    "world_model.lr": "Adam step size",
    "world_model.grad_clip": "global gradient norm",
    "world_model.weights.temperature": "InfoNCE softmax temperature",
    "guidance.w_cfg": "classifier-free guidance scale",
    "guidance.w_ebm": "energy-gradient scale",
    "guidance.projection_window": "diffusion steps, inclusive; none disables projection",
    "guidance.variance_retention": "fraction of local variance kept",
    "guidance.sample_steps": "denoising steps at inference",
    "flow.steps": "fixed steps (euler, rk4) or initial step 1/steps (dopri)",
    "planner.H": "env steps between subgoals",
    "planner.K": "subgoals per plan",
    "planner.replan_every": "env steps executed per plan",
    "planner.max_env_steps": "env steps per episode",
    "planner.iterations": "Adam steps",
    "planner.batch_size": "windows",
    "planner.lr": "Adam step size",
    "planner.hidden": "layer widths",
    "planner.ebm_hidden": "layer widths",
    "planner.start_stride": "env steps between augmented window starts",
    "planner.proj_warmup": "fraction of iterations",
    "schedule.L": "diffusion steps",
    "schedule.beta_start": "noise variance at step 1",
    "schedule.beta_end": "noise variance at step L",
    "seeds.episodes": "evaluation episodes",
    "seeds.out_dir": "default output directory (HDFLOW_OUT overrides)",
}


class ConfigError(ValueError):
    pass


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _parse(text: str, tp, key: str):
    text = text.strip()
    origin, args = typing.get_origin(tp), typing.get_args(tp)
    try:
        if origin in (typing.Union, types.UnionType):
            if text.lower() == "none" and type(None) in args:
                return None
            return _parse(text, next(a for a in args if a is not type(None)), key)
        if origin is tuple:
            items = [s.strip() for s in text.split(",")] if text else []
            inner = args[0] if len(args) == 2 and args[1] is Ellipsis else None
            if inner is None and len(items) != len(args):
                raise ValueError(f"expected {len(args)} values")
            return tuple(_parse(s, inner or a, key) for s, a in zip(items, [inner] * len(items) if inner else args))
        if tp is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError("expected true or false")
            return text.lower() == "true"
        if tp in (int, float, str):
            return tp(text)
    except (ValueError, StopIteration) as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}: {exc}") from exc
    raise ConfigError(f"{key}: unsupported field type {tp!r}")


def _sections(obj, prefix: str):
    """``(section name, dataclass instance)`` pairs; nested dataclasses get dotted sections."""
    yield prefix, obj
    for f in fields(obj):
        v = getattr(obj, f.name)
        if is_dataclass(v):
            yield from _sections(v, f"{prefix}.{f.name}")


def render_config(cfg: RunConfig) -> str:
    out = io.StringIO()
    out.write("# run configuration; unset keys take their defaults\n")
    for top in fields(cfg):
        for sec, obj in _sections(getattr(cfg, top.name), top.name):
            out.write(f"\n[{sec}]\n")
            for f in fields(obj):
                v = getattr(obj, f.name)
                if is_dataclass(v):
                    continue
                note = UNITS.get(f"{sec}.{f.name}")
                if note:
                    out.write(f"# {note}\n")
                out.write(f"{f.name} = {_fmt(v)}\n")
    return out.getvalue()


def _build(cls, section: str, cp: configparser.ConfigParser):
    hints = typing.get_type_hints(cls)
    kw, known = {}, set()
    for f in fields(cls):
        known.add(f.name)
        tp = hints[f.name]
        if is_dataclass(tp):
            kw[f.name] = _build(tp, f"{section}.{f.name}" if section else f.name, cp)
        elif section and cp.has_option(section, f.name):
            kw[f.name] = _parse(cp.get(section, f.name), tp, f"{section}.{f.name}")
    if section and cp.has_section(section):
        extra = set(cp.options(section)) - known
        if extra:
            raise ConfigError(f"[{section}]: unknown keys {sorted(extra)}")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=None)
    cp.optionxform = str  # keys are case sensitive (H, K, L)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    valid = {sec for top in fields(RunConfig) for sec, _ in _sections(getattr(RunConfig(), top.name), top.name)}
    unknown = set(cp.sections()) - valid
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    return _build(RunConfig, "", cp)


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read())


def with_planner(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, planner=replace(cfg.planner, **kw))

