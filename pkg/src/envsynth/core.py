"""Shared data model: environments, tools, scenario schemas, states and trajectories.

Environment and trajectory files are JSON documents.  Everything parsed here is
validated eagerly and returned as frozen dataclasses; scenario states stay
plain ``dict``/``list`` trees so they serialize without ceremony.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from .errors import ParseError, PathError, SpecError

VALUE_KINDS = ("string", "integer", "number", "boolean", "list", "record")
CLASSIFICATIONS = ("external", "internal")
SIDES = ("assistant", "user")
EXECUTOR_MODES = ("builtin", "external")
EFFECT_OPS = ("list", "get", "filter", "create", "update", "delete", "compute")
COMPARATORS = ("eq", "ne", "lt", "le", "gt", "ge", "contains", "in")

ISO_8601 = r"\d{4}-\d{2}-\d{2}(T\d{2}:\d{2}(:\d{2}(\.\d+)?)?(Z|[+-]\d{2}:?\d{2})?)?"
_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_\-]*$")


class _Missing:
    __slots__ = ()

    def __repr__(self) -> str:
        return "MISSING"

    def __bool__(self) -> bool:
        return False


MISSING: Any = _Missing()


# ---------------------------------------------------------------------------
# value checks


def kind_of(value: Any) -> Optional[str]:
    """Return the value kind of a JSON value, or None for null/unknown types."""
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, int):
        return "integer"
    if isinstance(value, float):
        return "number"
    if isinstance(value, str):
        return "string"
    if isinstance(value, list):
        return "list"
    if isinstance(value, dict):
        return "record"
    return None


def kind_matches(value: Any, value_kind: str) -> bool:
    actual = kind_of(value)
    if value_kind == "number":
        return actual in ("integer", "number") and not (
            isinstance(value, float) and not math.isfinite(value)
        )
    return actual == value_kind


@dataclass(frozen=True)
class Violation:
    path: str
    rule: str
    message: str = ""

    def to_dict(self) -> dict:
        return {"path": self.path, "rule": self.rule, "message": self.message}


@dataclass(frozen=True)
class ValidationReport:
    violations: Tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def rules(self) -> List[str]:
        return [v.rule for v in self.violations]

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violations": [v.to_dict() for v in self.violations]}


# ---------------------------------------------------------------------------
# parameter / tool / schema types


@dataclass(frozen=True)
class ParamSpec:
    name: str
    description: str = ""
    value_kind: str = "string"
    required: bool = True
    default: Any = MISSING
    pattern: Optional[str] = None
    min: Optional[float] = None
    max: Optional[float] = None
    classification_hint: Optional[str] = None

    @property
    def has_default(self) -> bool:
        return self.default is not MISSING

    @property
    def optional(self) -> bool:
        return not self.required or self.has_default

    def effective_pattern(self) -> Optional[str]:
        if self.pattern is None and self.name == "current_time" and self.value_kind == "string":
            return ISO_8601
        return self.pattern

    def check(self, value: Any, path: str) -> List[Violation]:
        """Check one present value against kind, pattern and bounds."""
        if not kind_matches(value, self.value_kind):
            return [Violation(path, "kind", f"expected {self.value_kind}, got {kind_of(value)}")]
        out = []
        pattern = self.effective_pattern()
        if pattern is not None and re.fullmatch(pattern, value) is None:
            out.append(Violation(path, "pattern", f"{value!r} does not match {pattern!r}"))
        if self.value_kind in ("integer", "number"):
            if self.min is not None and value < self.min:
                out.append(Violation(path, "bounds", f"{value} < min {self.min}"))
            if self.max is not None and value > self.max:
                out.append(Violation(path, "bounds", f"{value} > max {self.max}"))
        return out

    def to_dict(self) -> dict:
        d: Dict[str, Any] = {
            "name": self.name,
            "description": self.description,
            "value_kind": self.value_kind,
            "required": self.required,
        }
        if self.has_default:
            d["default"] = self.default
        for key in ("pattern", "min", "max", "classification_hint"):
            val = getattr(self, key)
            if val is not None:
                d[key] = val
        return d

    @classmethod
    def from_dict(cls, raw: Any, path: str) -> "ParamSpec":
        if not isinstance(raw, dict):
            raise SpecError(path, "parameter must be an object")
        known = {"name", "description", "value_kind", "required", "default",
                 "pattern", "min", "max", "classification_hint"}
        extra = set(raw) - known
        if extra:
            raise SpecError(path, f"unknown keys {sorted(extra)}")
        name = raw.get("name")
        if not isinstance(name, str) or not name:
            raise SpecError(f"{path}.name", "must be a non-empty string")
        kind = raw.get("value_kind", "string")
        if kind not in VALUE_KINDS:
            raise SpecError(f"{path}.value_kind", f"must be one of {VALUE_KINDS}")
        description = raw.get("description", "")
        if not isinstance(description, str):
            raise SpecError(f"{path}.description", "must be a string")
        default = raw.get("default", MISSING)
        required = raw.get("required", default is MISSING)
        if not isinstance(required, bool):
            raise SpecError(f"{path}.required", "must be a boolean")
        if default is not MISSING and required:
            raise SpecError(f"{path}.required", "a parameter with a default cannot be required")
        pattern = raw.get("pattern")
        if pattern is not None:
            if kind != "string":
                raise SpecError(f"{path}.pattern", "pattern is only allowed on strings")
            try:
                re.compile(pattern)
            except (re.error, TypeError) as exc:
                raise SpecError(f"{path}.pattern", f"invalid regular expression: {exc}") from None
        bounds = {}
        for key in ("min", "max"):
            val = raw.get(key)
            if val is not None and kind_of(val) not in ("integer", "number"):
                raise SpecError(f"{path}.{key}", "bound must be numeric")
            bounds[key] = val
        if bounds["min"] is not None and bounds["max"] is not None and bounds["min"] > bounds["max"]:
            raise SpecError(f"{path}.min", "min exceeds max")
        hint = raw.get("classification_hint")
        if hint is not None and hint not in CLASSIFICATIONS:
            raise SpecError(f"{path}.classification_hint", f"must be one of {CLASSIFICATIONS}")
        spec = cls(name=name, description=description, value_kind=kind, required=required,
                   default=default, pattern=pattern, min=bounds["min"], max=bounds["max"],
                   classification_hint=hint)
        if default is not MISSING and default is not None:
            bad = spec.check(default, f"{path}.default")
            if bad:
                raise SpecError(bad[0].path, f"default does not conform: {bad[0].message}")
        return spec


def _param_list(raw: Any, path: str) -> Tuple[ParamSpec, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        raise SpecError(path, "must be a list")
    params = tuple(ParamSpec.from_dict(p, f"{path}[{i}]") for i, p in enumerate(raw))
    seen = set()
    for i, p in enumerate(params):
        if p.name in seen:
            raise SpecError(f"{path}[{i}].name", f"duplicate parameter {p.name!r}")
        seen.add(p.name)
    return params


@dataclass(frozen=True)
class CollectionSpec:
    name: str
    key: str
    fields: Tuple[ParamSpec, ...]

    def field(self, name: str) -> Optional[ParamSpec]:
        for f in self.fields:
            if f.name == name:
                return f
        return None

    def to_dict(self) -> dict:
        return {"key": self.key, "fields": [f.to_dict() for f in self.fields]}


@dataclass(frozen=True)
class ScenarioSchema:
    collections: Tuple[CollectionSpec, ...] = ()
    scalars: Tuple[ParamSpec, ...] = ()

    def collection(self, name: str) -> Optional[CollectionSpec]:
        for c in self.collections:
            if c.name == name:
                return c
        return None

    def scalar(self, name: str) -> Optional[ParamSpec]:
        for s in self.scalars:
            if s.name == name:
                return s
        return None

    def key_field(self, collection: str) -> Optional[str]:
        c = self.collection(collection)
        return c.key if c else None

    def to_dict(self) -> dict:
        return {
            "collections": {c.name: c.to_dict() for c in self.collections},
            "scalars": [s.to_dict() for s in self.scalars],
        }

    @classmethod
    def from_dict(cls, raw: Any, path: str = "schema") -> "ScenarioSchema":
        if raw is None:
            return cls()
        if not isinstance(raw, dict):
            raise SpecError(path, "schema must be an object")
        extra = set(raw) - {"collections", "scalars"}
        if extra:
            raise SpecError(path, f"unknown keys {sorted(extra)}")
        colls_raw = raw.get("collections") or {}
        if not isinstance(colls_raw, dict):
            raise SpecError(f"{path}.collections", "must be an object")
        collections = []
        for cname, craw in colls_raw.items():
            cpath = f"{path}.collections.{cname}"
            if not isinstance(craw, dict):
                raise SpecError(cpath, "must be an object")
            fields = _param_list(craw.get("fields"), f"{cpath}.fields")
            key = craw.get("key")
            if not isinstance(key, str) or key not in {f.name for f in fields}:
                raise SpecError(f"{cpath}.key", "must name exactly one declared field")
            collections.append(CollectionSpec(cname, key, fields))
        scalars = _param_list(raw.get("scalars"), f"{path}.scalars")
        coll_names = {c.name for c in collections}
        for i, s in enumerate(scalars):
            if s.name in coll_names:
                raise SpecError(f"{path}.scalars[{i}].name", "clashes with a collection name")
            if s.name == "current_time" and s.value_kind != "string":
                raise SpecError(f"{path}.scalars[{i}].value_kind", "current_time must be a string")
        return cls(tuple(collections), scalars)


# ---------------------------------------------------------------------------
# effects (declarative executor bindings)

Source = Union[str, Dict[str, Any]]

_SIMPLE_SOURCES = ("key", "record", "records", "count")
_PREFIX_SOURCES = ("arg:", "field:", "state:", "counter:", "literal:")


def source_kind(src: Source) -> Tuple[str, Any]:
    """Split a source expression into (kind, operand)."""
    if isinstance(src, dict):
        if set(src) != {"literal"}:
            raise ValueError(f"bad source object {src!r}")
        return "literal", src["literal"]
    if not isinstance(src, str):
        raise ValueError(f"bad source {src!r}")
    if src in _SIMPLE_SOURCES:
        return src, None
    for prefix in _PREFIX_SOURCES:
        if src.startswith(prefix):
            return prefix[:-1], src[len(prefix):]
    raise ValueError(f"unknown source {src!r}")


@dataclass(frozen=True)
class EffectSpec:
    op: str
    collection: Optional[str] = None
    key_from: Optional[str] = None
    set_fields: Mapping[str, Source] = field(default_factory=dict)
    where: Tuple[Tuple[str, str, str], ...] = ()
    returns: Mapping[str, Source] = field(default_factory=dict)
    requires: Tuple[Tuple[str, str], ...] = ()

    def to_dict(self) -> dict:
        d: Dict[str, Any] = {"op": self.op}
        if self.collection is not None:
            d["collection"] = self.collection
        if self.key_from is not None:
            d["key_from"] = self.key_from
        if self.set_fields:
            d["set_fields"] = dict(self.set_fields)
        if self.where:
            d["where"] = [list(w) for w in self.where]
        if self.returns:
            d["returns"] = dict(self.returns)
        if self.requires:
            d["requires"] = [list(r) for r in self.requires]
        return d

    @classmethod
    def from_dict(cls, raw: Any, path: str) -> "EffectSpec":
        if not isinstance(raw, dict):
            raise SpecError(path, "effect must be an object")
        extra = set(raw) - {"op", "collection", "key_from", "set_fields", "where", "returns", "requires"}
        if extra:
            raise SpecError(path, f"unknown keys {sorted(extra)}")
        op = raw.get("op")
        if op not in EFFECT_OPS:
            raise SpecError(f"{path}.op", f"must be one of {EFFECT_OPS}")
        where = []
        for i, w in enumerate(raw.get("where") or []):
            if not (isinstance(w, list) and len(w) == 3 and all(isinstance(x, str) for x in w)):
                raise SpecError(f"{path}.where[{i}]", "must be [field, comparator, argument]")
            if w[1] not in COMPARATORS:
                raise SpecError(f"{path}.where[{i}]", f"comparator must be one of {COMPARATORS}")
            where.append(tuple(w))
        requires = []
        for i, r in enumerate(raw.get("requires") or []):
            if not (isinstance(r, list) and len(r) == 2 and all(isinstance(x, str) for x in r)):
                raise SpecError(f"{path}.requires[{i}]", "must be [collection, argument]")
            requires.append(tuple(r))
        for key in ("set_fields", "returns"):
            block = raw.get(key) or {}
            if not isinstance(block, dict):
                raise SpecError(f"{path}.{key}", "must be an object")
            for name, src in block.items():
                try:
                    source_kind(src)
                except ValueError as exc:
                    raise SpecError(f"{path}.{key}.{name}", str(exc)) from None
        return cls(op=op, collection=raw.get("collection"), key_from=raw.get("key_from"),
                   set_fields=dict(raw.get("set_fields") or {}), where=tuple(where),
                   returns=dict(raw.get("returns") or {}), requires=tuple(requires))


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str = ""
    inputs: Tuple[ParamSpec, ...] = ()
    outputs: Tuple[ParamSpec, ...] = ()
    effect: Optional[EffectSpec] = None
    side: str = "assistant"

    def input(self, name: str) -> Optional[ParamSpec]:
        for p in self.inputs:
            if p.name == name:
                return p
        return None

    def output(self, name: str) -> Optional[ParamSpec]:
        for p in self.outputs:
            if p.name == name:
                return p
        return None

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "description": self.description,
            "side": self.side,
            "inputs": [p.to_dict() for p in self.inputs],
            "outputs": [p.to_dict() for p in self.outputs],
        }
        if self.effect is not None:
            d["effect"] = self.effect.to_dict()
        return d

    @classmethod
    def from_dict(cls, raw: Any, path: str) -> "ToolSpec":
        if not isinstance(raw, dict):
            raise SpecError(path, "tool must be an object")
        extra = set(raw) - {"name", "description", "side", "inputs", "outputs", "effect"}
        if extra:
            raise SpecError(path, f"unknown keys {sorted(extra)}")
        name = raw.get("name")
        if not isinstance(name, str) or not _NAME_RE.match(name):
            raise SpecError(f"{path}.name", "must be an identifier-like string")
        side = raw.get("side", "assistant")
        if side not in SIDES:
            raise SpecError(f"{path}.side", f"must be one of {SIDES}")
        effect = raw.get("effect")
        return cls(
            name=name,
            description=raw.get("description", ""),
            inputs=_param_list(raw.get("inputs"), f"{path}.inputs"),
            outputs=_param_list(raw.get("outputs"), f"{path}.outputs"),
            effect=EffectSpec.from_dict(effect, f"{path}.effect") if effect is not None else None,
            side=side,
        )


@dataclass(frozen=True)
class ToolDecl:
    """A tool as declared in environment metadata (names only)."""

    name: str
    inputs: Tuple[str, ...] = ()
    outputs: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"name": self.name, "inputs": list(self.inputs), "outputs": list(self.outputs)}


@dataclass(frozen=True)
class Metadata:
    description: str = ""
    domain: str = ""
    version: str = ""
    tools: Optional[Tuple[ToolDecl, ...]] = None

    def to_dict(self) -> dict:
        d: Dict[str, Any] = {"description": self.description, "domain": self.domain,
                             "version": self.version}
        if self.tools is not None:
            d["tools"] = [t.to_dict() for t in self.tools]
        return d


@dataclass(frozen=True)
class EnvironmentSpec:
    name: str
    metadata: Metadata = field(default_factory=Metadata)
    schema: ScenarioSchema = field(default_factory=ScenarioSchema)
    tools: Tuple[ToolSpec, ...] = ()
    executor_mode: str = "builtin"

    def tool(self, name: str) -> Optional[ToolSpec]:
        for t in self.tools:
            if t.name == name:
                return t
        return None

    @property
    def tool_names(self) -> List[str]:
        return [t.name for t in self.tools]

    def declared_interface(self) -> Tuple[ToolDecl, ...]:
        """The interface promised by metadata; falls back to the tool list itself."""
        if self.metadata.tools is not None:
            return self.metadata.tools
        return tuple(ToolDecl(t.name, tuple(p.name for p in t.inputs),
                              tuple(p.name for p in t.outputs)) for t in self.tools)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "metadata": self.metadata.to_dict(),
            "executor_mode": self.executor_mode,
            "schema": self.schema.to_dict(),
            "tools": [t.to_dict() for t in self.tools],
        }


def _check_effect(effect: EffectSpec, tool: ToolSpec, schema: ScenarioSchema, path: str) -> None:
    inputs = {p.name for p in tool.inputs}
    coll = None
    if effect.op != "compute":
        coll = schema.collection(effect.collection or "")
        if coll is None:
            raise SpecError(f"{path}.collection", f"unknown collection {effect.collection!r}")
    elif effect.collection is not None:
        raise SpecError(f"{path}.collection", "compute effects do not take a collection")
    if effect.op in ("get", "update") and effect.key_from is None:
        raise SpecError(f"{path}.key_from", f"{effect.op} needs key_from")
    if effect.key_from is not None and effect.key_from not in inputs:
        raise SpecError(f"{path}.key_from", f"{effect.key_from!r} is not an input of {tool.name}")
    for i, (fname, _cmp, arg) in enumerate(effect.where):
        if arg not in inputs:
            raise SpecError(f"{path}.where[{i}]", f"{arg!r} is not an input")
        if coll is not None and coll.field(fname) is None:
            raise SpecError(f"{path}.where[{i}]", f"{fname!r} is not a field of {coll.name}")
    for i, (cname, arg) in enumerate(effect.requires):
        if schema.collection(cname) is None:
            raise SpecError(f"{path}.requires[{i}]", f"unknown collection {cname!r}")
        if arg not in inputs:
            raise SpecError(f"{path}.requires[{i}]", f"{arg!r} is not an input")
    for block_name in ("set_fields", "returns"):
        for target, src in getattr(effect, block_name).items():
            kind, operand = source_kind(src)
            spath = f"{path}.{block_name}.{target}"
            if kind == "arg" and operand not in inputs:
                raise SpecError(spath, f"{operand!r} is not an input")
            if kind == "state" and schema.scalar(operand) is None:
                raise SpecError(spath, f"{operand!r} is not a scalar")
            if kind == "field" and (coll is None or coll.field(operand) is None):
                raise SpecError(spath, f"{operand!r} is not a collection field")
            if block_name == "set_fields":
                if kind in ("key", "record", "records", "count", "field"):
                    raise SpecError(spath, f"{kind} cannot feed set_fields")
                if effect.op == "compute" and schema.scalar(target) is None:
                    raise SpecError(spath, f"{target!r} is not a scalar")
                if coll is not None and coll.field(target) is None:
                    raise SpecError(spath, f"{target!r} is not a field of {coll.name}")
    if effect.op == "create":
        assert coll is not None
        if coll.key not in effect.set_fields:
            raise SpecError(f"{path}.set_fields", f"create must set key field {coll.key!r}")
    outputs = {p.name for p in tool.outputs}
    missing = outputs - set(effect.returns)
    if missing:
        raise SpecError(f"{path}.returns", f"does not cover outputs {sorted(missing)}")


def environment_from_dict(raw: Any) -> EnvironmentSpec:
    if not isinstance(raw, dict):
        raise ParseError("environment document must be a JSON object")
    extra = set(raw) - {"name", "metadata", "schema", "tools", "executor_mode"}
    if extra:
        raise SpecError("", f"unknown top-level keys {sorted(extra)}")
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        raise SpecError("name", "environment name must be a non-empty string")
    meta_raw = raw.get("metadata") or {}
    if not isinstance(meta_raw, dict):
        raise SpecError("metadata", "must be an object")
    decls = None
    if "tools" in meta_raw:
        decls = []
        for i, d in enumerate(meta_raw["tools"] or []):
            if not isinstance(d, dict) or not isinstance(d.get("name"), str):
                raise SpecError(f"metadata.tools[{i}]", "must be {name, inputs, outputs}")
            decls.append(ToolDecl(d["name"], tuple(d.get("inputs") or ()), tuple(d.get("outputs") or ())))
        decls = tuple(decls)
    metadata = Metadata(str(meta_raw.get("description", "")), str(meta_raw.get("domain", "")),
                        str(meta_raw.get("version", "")), decls)
    schema = ScenarioSchema.from_dict(raw.get("schema"))
    tools_raw = raw.get("tools") or []
    if not isinstance(tools_raw, list):
        raise SpecError("tools", "must be a list")
    tools = tuple(ToolSpec.from_dict(t, f"tools[{i}]") for i, t in enumerate(tools_raw))
    seen = set()
    for i, t in enumerate(tools):
        if t.name in seen:
            raise SpecError(f"tools[{i}].name", f"duplicate tool name {t.name!r}")
        seen.add(t.name)
    mode = raw.get("executor_mode", "builtin")
    if mode not in EXECUTOR_MODES:
        raise SpecError("executor_mode", f"must be one of {EXECUTOR_MODES}")
    for i, t in enumerate(tools):
        if t.effect is not None:
            _check_effect(t.effect, t, schema, f"tools[{i}].effect")
        elif mode == "builtin" and t.side == "assistant":
            raise SpecError(f"tools[{i}].effect", "builtin environments need an effect per assistant tool")
    return EnvironmentSpec(name=name, metadata=metadata, schema=schema, tools=tools, executor_mode=mode)


def parse_environment(text: str) -> EnvironmentSpec:
    try:
        raw = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"malformed environment file: {exc}") from None
    return environment_from_dict(raw)


def serialize_environment(spec: EnvironmentSpec) -> str:
    return json.dumps(spec.to_dict(), indent=2, ensure_ascii=False) + "\n"


def load_environment(path: Union[str, Path]) -> EnvironmentSpec:
    return parse_environment(Path(path).read_text(encoding="utf-8"))


def load_environment_dir(directory: Union[str, Path]) -> List[EnvironmentSpec]:
    """Load every ``*.json`` environment in a directory, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ParseError(f"{directory} is not a directory")
    envs = [load_environment(p) for p in sorted(directory.glob("*.json"))]
    names = [e.name for e in envs]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise SpecError("name", f"duplicate environment names {sorted(dupes)}")
    return sorted(envs, key=lambda e: e.name)


# ---------------------------------------------------------------------------
# state validation


def validate_state(state: Any, schema: ScenarioSchema) -> ValidationReport:
    """Strict structural validation of a scenario state against its schema."""
    out: List[Violation] = []
    if not isinstance(state, dict):
        return ValidationReport((Violation("", "kind", "state must be a record"),))
    known = {s.name for s in schema.scalars} | {c.name for c in schema.collections}
    for key in state:
        if key not in known:
            out.append(Violation(str(key), "unknown-field", "not declared in schema"))
    for param in schema.scalars:
        value = state.get(param.name)
        if value is None:
            if param.required:
                out.append(Violation(param.name, "missing", "required scalar absent"))
            continue
        out.extend(param.check(value, param.name))
    for coll in schema.collections:
        records = state.get(coll.name)
        if records is None:
            out.append(Violation(coll.name, "missing", "collection absent"))
            continue
        if not isinstance(records, list):
            out.append(Violation(coll.name, "kind", "collection must be a list"))
            continue
        declared = {f.name for f in coll.fields}
        keys_seen = set()
        for i, rec in enumerate(records):
            rpath = f"{coll.name}[{i}]"
            if not isinstance(rec, dict):
                out.append(Violation(rpath, "kind", "record must be an object"))
                continue
            for fname in rec:
                if fname not in declared:
                    out.append(Violation(f"{rpath}.{fname}", "unknown-field", "not declared"))
            for fspec in coll.fields:
                value = rec.get(fspec.name)
                fpath = f"{rpath}.{fspec.name}"
                if value is None:
                    if fspec.required or fspec.name == coll.key:
                        out.append(Violation(fpath, "missing", "required field absent"))
                    continue
                out.extend(fspec.check(value, fpath))
            key_val = rec.get(coll.key)
            if key_val is not None:
                marker = json.dumps(key_val, sort_keys=True)
                if marker in keys_seen:
                    out.append(Violation(f"{rpath}.{coll.key}", "duplicate-key",
                                         f"key {key_val!r} repeated"))
                keys_seen.add(marker)
    return ValidationReport(tuple(out))


# ---------------------------------------------------------------------------
# paths and canonical forms


def parse_path(path: Any) -> Tuple[str, ...]:
    """Split ``a.b.c`` into segments; ``*`` matches every key/element."""
    if not isinstance(path, str) or not path:
        raise PathError(f"path must be a non-empty string, got {path!r}")
    segs = tuple(path.split("."))
    if any(s == "" or s != s.strip() for s in segs):
        raise PathError(f"malformed path {path!r}")
    return segs


def _locate(node: Any, segs: Sequence[str], schema: Optional[ScenarioSchema], key_field: Optional[str],
            top: bool) -> List[Tuple[Any, Any]]:
    """Return (container, locator) pairs addressed by ``segs`` under ``node``."""
    if not segs:
        return []
    seg, rest = segs[0], segs[1:]
    hits: List[Tuple[Any, Any]] = []
    if isinstance(node, dict):
        keys = list(node) if seg == "*" else ([seg] if seg in node else [])
        for k in keys:
            if not rest:
                hits.append((node, k))
            else:
                child_key = schema.key_field(k) if (top and schema is not None) else None
                hits.extend(_locate(node[k], rest, schema, child_key, False))
    elif isinstance(node, list):
        if seg == "*":
            idxs = list(range(len(node)))
        elif key_field is not None:
            idxs = [i for i, rec in enumerate(node)
                    if isinstance(rec, dict) and key_field in rec and _key_text(rec[key_field]) == seg]
        elif seg.isdigit() and int(seg) < len(node):
            idxs = [int(seg)]
        else:
            idxs = []
        for i in idxs:
            if not rest:
                hits.append((node, i))
            else:
                hits.extend(_locate(node[i], rest, schema, None, False))
    return hits


def _key_text(value: Any) -> str:
    return value if isinstance(value, str) else json.dumps(value)


def get_path(state: Any, path: str, schema: Optional[ScenarioSchema] = None) -> Any:
    """Value at ``path`` (first match), or MISSING."""
    hits = _locate(state, parse_path(path), schema, None, True)
    if not hits:
        return MISSING
    container, loc = hits[0]
    return container[loc]


def remove_paths(state: Any, paths: Iterable[str], schema: Optional[ScenarioSchema] = None) -> Any:
    """Deep copy of ``state`` with every addressed node removed."""
    tree = json.loads(json.dumps(state))
    for path in paths:
        segs = parse_path(path)
        hits = _locate(tree, segs, schema, None, True)
        # delete list elements back to front so indices stay valid
        list_hits = sorted((h for h in hits if isinstance(h[0], list)), key=lambda h: (id(h[0]), -h[1]))
        for container, loc in [h for h in hits if isinstance(h[0], dict)]:
            container.pop(loc, None)
        for container, loc in list_hits:
            del container[loc]
    return tree


def _dumps(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def normalize_state(state: Any, excluded_paths: Iterable[str] = (),
                    schema: Optional[ScenarioSchema] = None) -> Any:
    """Excluded paths removed, collections sorted by key (or by record text without a schema)."""
    excluded_paths = list(excluded_paths)
    for p in excluded_paths:
        parse_path(p)
    tree = remove_paths(state, excluded_paths, schema)
    if isinstance(tree, dict):
        for name, value in tree.items():
            if not isinstance(value, list) or not all(isinstance(r, dict) for r in value):
                continue
            key = schema.key_field(name) if schema is not None else None
            if key is not None:
                value.sort(key=lambda r: (_dumps(r.get(key)), _dumps(r)))
            elif schema is None or schema.collection(name) is not None:
                value.sort(key=_dumps)
    return tree


def canonicalize_state(state: Any, excluded_paths: Iterable[str] = (),
                       schema: Optional[ScenarioSchema] = None) -> bytes:
    """Deterministic bytes: sorted keys, sorted collections, shortest round-trip floats."""
    return _dumps(normalize_state(state, excluded_paths, schema)).encode("utf-8")


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class ToolCall:
    tool: str
    arguments: Mapping[str, Any] = field(default_factory=dict)
    masked_args: Tuple[str, ...] = ()
    result: Any = None
    block: Optional[str] = None

    kind = "tool_call"

    def to_dict(self) -> dict:
        d: Dict[str, Any] = {"kind": "tool_call", "tool": self.tool,
                             "arguments": dict(self.arguments),
                             "masked_args": list(self.masked_args)}
        if self.result is not None:
            d["result"] = self.result
        if self.block is not None:
            d["block"] = self.block
        return d


@dataclass(frozen=True)
class Message:
    role: str
    text: str

    kind = "message"

    def to_dict(self) -> dict:
        return {"kind": "message", "role": self.role, "text": self.text}


Step = Union[ToolCall, Message]


@dataclass(frozen=True)
class Turn:
    steps: Tuple[Step, ...] = ()
    user_query: Optional[str] = None

    def to_dict(self) -> dict:
        d: Dict[str, Any] = {"steps": [s.to_dict() for s in self.steps]}
        if self.user_query is not None:
            d["user_query"] = self.user_query
        return d


@dataclass(frozen=True)
class TrajectoryRecord:
    environment: str
    turns: Tuple[Turn, ...] = ()

    def tool_calls(self) -> List[ToolCall]:
        return [s for t in self.turns for s in t.steps if isinstance(s, ToolCall)]

    def to_dict(self) -> dict:
        return {"environment": self.environment, "turns": [t.to_dict() for t in self.turns]}

    @classmethod
    def from_calls(cls, environment: str, calls: Iterable[ToolCall]) -> "TrajectoryRecord":
        return cls(environment, (Turn(tuple(calls)),))


def _step_from_dict(raw: Any, path: str) -> Step:
    if not isinstance(raw, dict):
        raise SpecError(path, "step must be an object")
    kind = raw.get("kind")
    if kind == "message":
        role = raw.get("role")
        if role not in SIDES:
            raise SpecError(f"{path}.role", f"must be one of {SIDES}")
        return Message(role, str(raw.get("text", "")))
    if kind != "tool_call":
        raise SpecError(f"{path}.kind", "must be tool_call or message")
    tool = raw.get("tool")
    if not isinstance(tool, str) or not tool:
        raise SpecError(f"{path}.tool", "must be a non-empty string")
    args = raw.get("arguments") or {}
    if not isinstance(args, dict):
        raise SpecError(f"{path}.arguments", "must be an object")
    masked = raw.get("masked_args") or []
    if not isinstance(masked, list) or not all(isinstance(m, str) for m in masked):
        raise SpecError(f"{path}.masked_args", "must be a list of names")
    for m in masked:
        if m not in args:
            raise SpecError(f"{path}.masked_args", f"{m!r} is not among the arguments")
    return ToolCall(tool, dict(args), tuple(masked), raw.get("result"), raw.get("block"))


def trajectory_from_dict(raw: Any, env: Optional[EnvironmentSpec] = None) -> TrajectoryRecord:
    if not isinstance(raw, dict):
        raise ParseError("trajectory document must be a JSON object")
    name = raw.get("environment")
    if not isinstance(name, str) or not name:
        raise SpecError("environment", "must be a non-empty string")
    turns = []
    for ti, traw in enumerate(raw.get("turns") or []):
        if not isinstance(traw, dict):
            raise SpecError(f"turns[{ti}]", "turn must be an object")
        steps = tuple(_step_from_dict(s, f"turns[{ti}].steps[{si}]")
                      for si, s in enumerate(traw.get("steps") or []))
        turns.append(Turn(steps, traw.get("user_query")))
    traj = TrajectoryRecord(name, tuple(turns))
    if env is not None:
        check_trajectory(traj, env)
    return traj


def check_trajectory(traj: TrajectoryRecord, env: EnvironmentSpec) -> None:
    if traj.environment != env.name:
        raise SpecError("environment", f"trajectory targets {traj.environment!r}, not {env.name!r}")
    names = set(env.tool_names)
    for ti, turn in enumerate(traj.turns):
        for si, step in enumerate(turn.steps):
            if isinstance(step, ToolCall) and step.tool not in names:
                raise SpecError(f"turns[{ti}].steps[{si}].tool", f"unknown tool {step.tool!r}")


def parse_trajectory(text: str, env: Optional[EnvironmentSpec] = None) -> TrajectoryRecord:
    try:
        raw = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"malformed trajectory file: {exc}") from None
    return trajectory_from_dict(raw, env)


def serialize_trajectory(traj: TrajectoryRecord) -> str:
    return json.dumps(traj.to_dict(), indent=2, ensure_ascii=False) + "\n"


def load_json(path: Union[str, Path]) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
