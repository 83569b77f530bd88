"""Run configuration: a YAML document plus ``--override`` dot-paths."""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .recipe import MergeRecipe
from .theory import TheoryConfig

COMMANDS = ("merge", "inspect", "diff", "theory")
SEED_ENV = "MERGE_SEED"


@dataclass
class RunConfig:
    command: str
    base_path: Path | None = None
    expert_paths: list = field(default_factory=list)
    lora_paths: list = field(default_factory=list)
    recipe: MergeRecipe = field(default_factory=MergeRecipe)
    key_filter: list | None = None
    key_overrides: list = field(default_factory=list)
    output_path: Path | None = None
    report_dir: Path = Path("reports")
    seed: int = 0
    bins: int = 16
    theory: TheoryConfig = field(default_factory=TheoryConfig)
    raw: dict = field(default_factory=dict)

    def inputs(self) -> list[Path]:
        return [p for p in [self.base_path, *self.expert_paths, *self.lora_paths] if p is not None]

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; choose from {COMMANDS}")
        if self.command in ("merge", "inspect", "diff"):
            if self.base_path is None:
                raise ConfigError(f"{self.command} needs 'base'")
            if not self.expert_paths and not self.lora_paths:
                raise ConfigError(f"{self.command} needs at least one expert or LoRA adapter")
        if self.command == "merge":
            if self.output_path is None:
                raise ConfigError("merge needs 'output'")
            out = self.output_path.resolve()
            if any(out == p.resolve() for p in self.inputs()):
                raise ConfigError("output path must differ from every input path")
        return self


def set_dot_path(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {dotted!r}")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {dotted!r} descends into non-mapping {part!r}")
        node = child
    node[parts[-1]] = value


def apply_overrides(tree: dict, overrides) -> dict:
    tree = copy.deepcopy(tree)
    for item in overrides or ():
        key, sep, text = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like KEY=VALUE")
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {text!r}: {exc}") from None
        set_dot_path(tree, key.strip(), value)
    return tree


def _theory_config(d: dict) -> TheoryConfig:
    names = {f.name for f in dataclasses.fields(TheoryConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown theory key(s): {sorted(unknown)}")
    d = {k: tuple(v) if k in ("eta_range", "steps_range", "sweep_steps") else v for k, v in d.items()}
    return TheoryConfig(**d)


def from_dict(tree: dict, root: Path = Path("."), env=None) -> RunConfig:
    env = os.environ if env is None else env
    known = {"command", "base", "experts", "lora", "recipe", "key_filter", "key_overrides",
             "output", "report_dir", "seed", "bins", "theory"}
    unknown = set(tree) - known
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")

    def path(p):
        return None if p is None else (root / Path(p))

    seed = tree.get("seed", 0)
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    recipe_tree = dict(tree.get("recipe") or {})
    if "seed" in tree or env.get(SEED_ENV):
        recipe_tree["seed"] = seed
    theory_tree = dict(tree.get("theory") or {})
    if "seed" in tree or env.get(SEED_ENV):
        theory_tree["seed"] = seed
    try:
        recipe = MergeRecipe.from_dict(recipe_tree)
        theory = _theory_config(theory_tree)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

    cfg = RunConfig(
        command=str(tree.get("command", "")),
        base_path=path(tree.get("base")),
        expert_paths=[path(p) for p in tree.get("experts") or []],
        lora_paths=[path(p) for p in tree.get("lora") or []],
        recipe=recipe,
        key_filter=list(tree["key_filter"]) if tree.get("key_filter") else None,
        key_overrides=list(tree.get("key_overrides") or []),
        output_path=path(tree.get("output")),
        report_dir=path(tree.get("report_dir", "reports")),
        seed=int(seed),
        bins=int(tree.get("bins", 16)),
        theory=theory,
        raw=tree,
    )
    return cfg.validate()


def load_config(path, overrides=(), env=None) -> RunConfig:
    path = Path(path)
    try:
        tree = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(tree, dict):
        raise ConfigError(f"{path} must hold a mapping at top level")
    return from_dict(apply_overrides(tree, overrides), path.parent, env)
