"""Experiment configuration: a JSON document validated against a strict schema.

Unknown keys are rejected. Every validation error names the offending
location as a JSON pointer (``/dataset/path``) so it can be reported verbatim.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from neurogen.archspec import BUILTIN_KINDS, ArchSpec, builtin_arch, embedding_table
from neurogen.dataio import Dataset, load_idx_dataset, load_text_csv, synth_blobs
from neurogen.generator import GeneratorConfig, stage2_instruction
from neurogen.refcorpus import RefTrainConfig
from neurogen.rng import stream
from neurogen.training import SoftClipConfig, StageConfig


class ConfigError(ValueError):
    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"
        self.message = message


_POS_INT = {"type": "integer", "minimum": 1}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_SEED = {"type": "integer", "minimum": 0}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_ARCH = _obj({
    "kind": {"enum": list(BUILTIN_KINDS)},
    "input_shape": {"type": "array", "items": _POS_INT, "minItems": 1, "maxItems": 3},
    "classes": {"type": "integer", "minimum": 2},
    "widths": {"type": "array", "items": _POS_INT},
    "hidden": _POS_INT,
    "embed_dim": _POS_INT,
}, required=("kind", "input_shape", "classes"))

SCHEMA = _obj({
    "seed": _SEED,
    "output_dir": {"type": "string", "minLength": 1},
    "arch": _ARCH,
    "dataset": _obj({
        "source": {"enum": ["idx", "csv", "blobs"]},
        "name": {"type": "string", "minLength": 1},
        "path": {"type": "string", "minLength": 1},
        "prefix": {"type": "string"},
        "train_path": {"type": "string", "minLength": 1},
        "test_path": {"type": "string", "minLength": 1},
        "downsample": _POS_INT,
        "max_len": _POS_INT,
        "label_base": {"type": "integer"},
        "limit": _POS_INT,
        "k": {"type": "integer", "minimum": 2},
        "n_per_class": _POS_INT,
        "dim": _POS_INT,
        "separation": _POS_NUM,
        "seed": _SEED,
    }, required=("source",)),
    "generator": _obj({
        "d_model": _POS_INT,
        "layers": _POS_INT,
        "heads": _POS_INT,
        "max_seq_len": _POS_INT,
        "lora_rank": _POS_INT,
        "lora_scale": _POS_NUM,
        "patch_size": _POS_INT,
        "seed": _SEED,
    }),
    "reference": _obj({"epochs": _POS_INT, "lr": _POS_NUM, "batch_size": _POS_INT}),
    "stage1": _obj({"epochs": _POS_INT, "lr": _POS_NUM, "N": _POS_INT}),
    "stage2": _obj({
        "epochs": _POS_INT,
        "lr": _POS_NUM,
        "m": _POS_INT,
        "instruction_text": {"type": "string", "minLength": 1},
        "arch_name": {"type": "string", "minLength": 1},
        "task": {"type": "string", "minLength": 1},
    }),
    "ablation": _obj({"phase2_only": {"type": "boolean"}, "alpha": {"type": ["number", "null"], "exclusiveMinimum": 0}}),
    "adapt": _obj({"small_arch": _ARCH, "limit": _POS_INT}),
}, required=("arch", "dataset", "output_dir"))

DEFAULTS = {
    "seed": 0,
    "generator": {"d_model": 128, "layers": 4, "heads": 4, "max_seq_len": 1024, "lora_rank": 8,
                  "lora_scale": 16.0, "patch_size": 7},
    "reference": {"epochs": 30, "lr": 1e-3, "batch_size": 64},
    "stage1": {"epochs": 30, "lr": 1e-3, "N": 8},
    "stage2": {"epochs": 20, "lr": 1e-3, "m": 32, "task": "classification"},
    "ablation": {"phase2_only": False, "alpha": 0.5},
    "adapt": {},
}


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def validate(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        pointer = _pointer(err.absolute_path)
        if err.validator == "required":
            missing = err.message.split("'")[1]
            pointer = f"{pointer}/{missing}"
        elif err.validator == "additionalProperties":
            extra = err.message.split("'")[1]
            pointer = f"{pointer}/{extra}"
        raise ConfigError(err.message, pointer)
    ds = doc["dataset"]
    needs = {"idx": ["path"], "csv": ["train_path", "test_path"], "blobs": []}[ds["source"]]
    for key in needs:
        if key not in ds:
            raise ConfigError(f"{ds['source']} datasets need '{key}'", f"/dataset/{key}")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


class ExperimentConfig:
    """Validated configuration with defaults filled in."""

    def __init__(self, doc: dict, base_dir: Path | None = None):
        validate(doc)
        self.raw = doc
        self.doc = _merge(DEFAULTS, doc)
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls(doc, path.parent)

    def override(self, pointer: str, value) -> None:
        """Set a scalar field, e.g. ``override("/stage2/lr", 0.01)``; revalidates."""
        parts = [p for p in pointer.split("/") if p]
        raw = copy.deepcopy(self.raw)
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
        validate(raw)
        self.raw = raw
        self.doc = _merge(DEFAULTS, raw)

    # derived values ----------------------------------------------------------

    @property
    def config_hash(self) -> str:
        """sha256 of the merged document minus ``output_dir`` (where results go, not what they are)."""
        doc = {k: v for k, v in self.doc.items() if k != "output_dir"}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    def sub_seed(self, name: str) -> int:
        """Per-purpose seed derived from the single experiment seed."""
        return int(stream(self.seed, name).integers(2**31 - 1))

    @property
    def output_dir(self) -> Path:
        return self._resolve(self.doc["output_dir"])

    def _resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def arch(self, section: str = "arch") -> ArchSpec:
        spec = self.doc["adapt"]["small_arch"] if section == "small_arch" else self.doc["arch"]
        pointer = "/adapt/small_arch" if section == "small_arch" else "/arch"
        kw = {k: spec[k] for k in ("widths", "hidden", "embed_dim") if k in spec}
        try:
            return builtin_arch(spec["kind"], spec["input_shape"], spec["classes"], **kw)
        except ValueError as exc:
            raise ConfigError(str(exc), pointer) from None

    def small_arch(self) -> ArchSpec:
        if "small_arch" not in self.doc["adapt"]:
            raise ConfigError("adaptation needs a small architecture", "/adapt/small_arch")
        return self.arch("small_arch")

    def frozen_tables(self, arch: ArchSpec | None = None):
        arch = arch or self.arch()
        tables = {i: embedding_table(l.vocab, l.dim, self.sub_seed("embedding"))
                  for i, l in enumerate(arch.layers) if l.kind == "embedding_ref" and l.frozen}
        return tables or None

    def dataset(self, limit: int | None = None) -> Dataset:
        ds = self.doc["dataset"]
        src = ds["source"]
        name = ds.get("name")
        if src == "blobs":
            data = synth_blobs(ds.get("k", self.doc["arch"]["classes"]), ds.get("n_per_class", 200),
                               ds.get("dim", 8), ds.get("separation", 6.0),
                               ds.get("seed", self.sub_seed("data")))
        elif src == "idx":
            path = self._resolve(ds["path"])
            if not path.is_dir():
                raise ConfigError(f"dataset directory {path} does not exist", "/dataset/path")
            try:
                data = load_idx_dataset(path, ds.get("prefix", ""), ds.get("downsample"), name or "mnist",
                                        self.doc["arch"]["classes"])
            except FileNotFoundError as exc:
                raise ConfigError(f"missing IDX file {exc}", "/dataset/path") from None
        else:
            paths = {}
            for key in ("train_path", "test_path"):
                paths[key] = self._resolve(ds[key])
                if not paths[key].is_file():
                    raise ConfigError(f"file {paths[key]} does not exist", f"/dataset/{key}")
            kw = dict(max_len=ds.get("max_len", 64), num_classes=self.doc["arch"]["classes"],
                      label_base=ds.get("label_base", 0), dataset_id=name or paths["train_path"].stem)
            data = Dataset(load_text_csv(paths["train_path"], split="train", **kw),
                           load_text_csv(paths["test_path"], split="test", **kw))
        limit = limit if limit is not None else ds.get("limit")
        if limit is not None:
            data = Dataset(data.train.limit(limit), data.test, data.centers)
        return data

    def generator_config(self) -> GeneratorConfig:
        g = self.doc["generator"]
        return GeneratorConfig(d_model=g["d_model"], n_layers=g["layers"], n_heads=g["heads"],
                               max_seq_len=g["max_seq_len"], lora_rank=g["lora_rank"],
                               lora_scale=float(g["lora_scale"]), patch_size=g["patch_size"],
                               seed=g.get("seed", self.sub_seed("generator")))

    def reference_config(self) -> RefTrainConfig:
        r = self.doc["reference"]
        return RefTrainConfig(epochs=r["epochs"], lr=r["lr"], batch_size=r["batch_size"])

    def stage1_config(self) -> StageConfig:
        s = self.doc["stage1"]
        return StageConfig(epochs=s["epochs"], lr=s["lr"], seed=self.sub_seed("stage1"))

    def stage2_config(self) -> StageConfig:
        s = self.doc["stage2"]
        return StageConfig(epochs=s["epochs"], lr=s["lr"], m=s["m"], seed=self.sub_seed("stage2"))

    def instruction(self, arch: ArchSpec | None = None) -> str:
        s = self.doc["stage2"]
        if "instruction_text" in s:
            return s["instruction_text"]
        arch = arch or self.arch()
        dataset_name = self.doc["dataset"].get("name", self.doc["dataset"]["source"])
        return stage2_instruction(s.get("arch_name", arch.name), dataset_name, s["task"])

    def softclip(self, phase2_only: bool) -> SoftClipConfig:
        alpha = self.doc["ablation"]["alpha"]
        if not phase2_only or alpha is None:
            return SoftClipConfig(False)
        return SoftClipConfig(True, float(alpha))
