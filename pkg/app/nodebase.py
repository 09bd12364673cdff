import hashlib
import json
import logging
from dataclasses import dataclass
from types import MappingProxyType
from typing import Any, Dict, Iterable, List, Mapping, Optional, Protocol, Tuple, Union

import numpy as np
from sortedcontainers import SortedList

from .http_api import TRANSPORT_ERRORS, JsonApi
from .ir import SchemaViolation, load_json
from .util import ComfyFlowError

logger = logging.getLogger(__name__)

WIDGET_TYPES = ("INT", "FLOAT", "STRING", "BOOLEAN", "COMBO")


class NodeBaseError(ComfyFlowError):
    pass


class DuplicateNodeName(NodeBaseError):
    def __init__(self, name: str) -> None:
        super().__init__(f"duplicate node_name {name!r}")
        self.name = name


class EmbeddingFailure(NodeBaseError):
    def __init__(self, name: str, reason: str = "") -> None:
        super().__init__(f"cannot embed {name!r}{f': {reason}' if reason else ''}")
        self.name = name


class DimensionMismatch(NodeBaseError):
    pass


class ProviderMismatch(NodeBaseError):
    pass


class EmptyBase(NodeBaseError):
    def __init__(self) -> None:
        super().__init__("node database is empty")


# ── Specs ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class NodeSpec:
    node_name: str
    input_names: Tuple[str, ...] = ()
    output_names: Tuple[str, ...] = ()
    input_types: Optional[Tuple[str, ...]] = None
    output_types: Optional[Tuple[str, ...]] = None
    required_inputs: Optional[Tuple[str, ...]] = None
    input_defaults: Optional[Dict[str, Any]] = None

    def __post_init__(self) -> None:
        for name in ("input_names", "output_names", "input_types", "output_types"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(value))
        if self.required_inputs is not None:
            object.__setattr__(self, "required_inputs", tuple(self.required_inputs))

    def input_type(self, port: str) -> Optional[str]:
        if self.input_types is None or port not in self.input_names:
            return None
        return self.input_types[self.input_names.index(port)]

    def output_type(self, port: str) -> Optional[str]:
        if self.output_types is None or port not in self.output_names:
            return None
        return self.output_types[self.output_names.index(port)]

    def is_required(self, port: str) -> bool:
        return self.required_inputs is not None and port in self.required_inputs

    def default(self, port: str) -> Optional[Any]:
        if self.input_defaults is None:
            return None
        return self.input_defaults.get(port)

    def has_default(self, port: str) -> bool:
        return self.input_defaults is not None and port in self.input_defaults

    def is_widget_input(self, port: str) -> bool:
        return self.input_type(port) in WIDGET_TYPES

    def to_obj(self) -> Dict[str, Any]:
        obj: Dict[str, Any] = {
            "node_name": self.node_name,
            "input_names": list(self.input_names),
            "output_names": list(self.output_names),
        }
        if self.input_types is not None:
            obj["input_types"] = list(self.input_types)
        if self.output_types is not None:
            obj["output_types"] = list(self.output_types)
        if self.required_inputs is not None:
            obj["required_inputs"] = list(self.required_inputs)
        if self.input_defaults is not None:
            obj["input_defaults"] = dict(self.input_defaults)
        return obj


def _string_list(obj: Dict[str, Any], key: str, path: str, optional: bool = False):
    value = obj.get(key)
    if value is None and optional:
        return None
    if not isinstance(value, list) or not all(isinstance(v, str) and v for v in value):
        raise SchemaViolation(f"{path}/{key}", "expected a list of non-empty strings")
    return tuple(value)


def spec_from_obj(obj: Any, path: str = "") -> NodeSpec:
    if not isinstance(obj, dict):
        raise SchemaViolation(path, "node record must be an object")
    name = obj.get("node_name")
    if not isinstance(name, str) or not name:
        raise SchemaViolation(f"{path}/node_name", "node_name must be a non-empty string")

    input_names = _string_list(obj, "input_names", path)
    output_names = _string_list(obj, "output_names", path)
    input_types = _string_list(obj, "input_types", path, optional=True)
    output_types = _string_list(obj, "output_types", path, optional=True)
    required = _string_list(obj, "required_inputs", path, optional=True)

    if input_types is not None and len(input_types) != len(input_names):
        raise SchemaViolation(f"{path}/input_types", "not parallel to input_names")
    if output_types is not None and len(output_types) != len(output_names):
        raise SchemaViolation(f"{path}/output_types", "not parallel to output_names")
    if required is not None and not set(required) <= set(input_names):
        raise SchemaViolation(f"{path}/required_inputs", "not a subset of input_names")

    defaults = obj.get("input_defaults")
    if defaults is not None:
        if not isinstance(defaults, dict) or not set(defaults) <= set(input_names):
            raise SchemaViolation(f"{path}/input_defaults", "must map input names to values")

    return NodeSpec(name, input_names, output_names, input_types, output_types, required, defaults)


def parse_specs(data: Union[bytes, str]) -> List[NodeSpec]:
    obj = load_json(data)
    if not isinstance(obj, list):
        raise SchemaViolation("/", "node database snapshot must be an array")

    specs = []
    seen = set()
    for i, record in enumerate(obj):
        spec = spec_from_obj(record, f"/{i}")
        if spec.node_name in seen:
            raise DuplicateNodeName(spec.node_name)
        seen.add(spec.node_name)
        specs.append(spec)
    return specs


def emit_specs(specs: Iterable[NodeSpec]) -> bytes:
    records = [spec.to_obj() for spec in sorted(specs, key=lambda s: s.node_name)]
    return json.dumps(records, ensure_ascii=False, indent=2).encode("utf-8")


def merge_specs(old: Iterable[NodeSpec], new: Iterable[NodeSpec]) -> List[NodeSpec]:
    merged = {spec.node_name: spec for spec in old}
    merged.update({spec.node_name: spec for spec in new})
    return [merged[name] for name in sorted(merged)]


def _object_info_input(spec: Any) -> Tuple[str, Dict[str, Any]]:
    if not isinstance(spec, list) or not spec:
        return "*", {}
    options = spec[1] if len(spec) > 1 and isinstance(spec[1], dict) else {}
    if isinstance(spec[0], list):
        options = dict(options)
        if spec[0] and "default" not in options:
            options["default"] = spec[0][0]
        return "COMBO", options
    return str(spec[0]), options


def specs_from_object_info(obj: Mapping[str, Any]) -> List[NodeSpec]:
    specs = []
    for name in sorted(obj):
        info = obj[name]
        inputs = info.get("input", {})
        order = info.get("input_order", {})

        input_names: List[str] = []
        input_types: List[str] = []
        required: List[str] = []
        defaults: Dict[str, Any] = {}
        for group in ("required", "optional"):
            declared = inputs.get(group) or {}
            for port in order.get(group, list(declared)):
                if port not in declared:
                    continue
                value_type, options = _object_info_input(declared[port])
                input_names.append(port)
                input_types.append(value_type)
                if group == "required":
                    required.append(port)
                widget = value_type in WIDGET_TYPES and not options.get("forceInput")
                if widget and "default" in options:
                    defaults[port] = options["default"]

        output_types = [str(t) if isinstance(t, str) else "COMBO" for t in info.get("output", [])]
        output_names = list(info.get("output_name") or output_types)

        if len(set(input_names)) != len(input_names) or len(set(output_names)) != len(
            output_names
        ):
            logger.warning("Skipping %s: duplicate port names", name)
            continue
        specs.append(
            NodeSpec(
                name,
                tuple(input_names),
                tuple(output_names),
                tuple(input_types),
                tuple(output_types),
                tuple(required),
                defaults,
            )
        )
    return specs


# ── Embeddings ────────────────────────────────────────────────────────────────


class Embedding:
    __slots__ = ("values",)

    def __init__(self, values: Any) -> None:
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("embedding must be a non-empty vector")
        norm = np.linalg.norm(arr)
        if not np.isfinite(norm) or norm == 0:
            raise ValueError("embedding has zero or non-finite norm")
        arr = arr / norm
        arr.setflags(write=False)
        self.values = arr

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"Embedding(dimension={self.dimension})"


class EmbeddingProvider(Protocol):
    provider_id: str
    dimension: int

    def embed(self, text: str) -> Embedding: ...


class TrigramEmbeddingProvider:
    """Offline provider: case-folded character trigrams hashed into a fixed number of buckets."""

    def __init__(self, dimension: int = 256) -> None:
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.provider_id = f"trigram-{dimension}"

    def embed(self, text: str) -> Embedding:
        padded = f" {text.casefold()} "
        counts = np.zeros(self.dimension, dtype=np.float64)
        for i in range(len(padded) - 2):
            digest = hashlib.blake2b(padded[i : i + 3].encode("utf-8"), digest_size=8).digest()
            counts[int.from_bytes(digest, "little") % self.dimension] += 1.0
        try:
            return Embedding(counts)
        except ValueError as e:
            raise EmbeddingFailure(text, str(e)) from e


class RemoteEmbeddingProvider:
    def __init__(
        self,
        endpoint: str,
        model: str,
        dimension: int = 256,
        timeout: float = 30,
        retries: int = 1,
        backoff_factor: float = 1,
    ) -> None:
        self.api = JsonApi(endpoint, timeout=timeout, retries=retries, backoff_factor=backoff_factor)
        self.model = model
        self.dimension = dimension
        self.provider_id = f"remote:{model}:{dimension}"

    @classmethod
    def from_config(cls, config: Mapping[str, Any]) -> "RemoteEmbeddingProvider":
        return cls(
            config["EMBEDDING_ENDPOINT"],
            config["EMBEDDING_MODEL"],
            dimension=config["EMBEDDING_DIMENSION"],
            timeout=config["EMBEDDING_TIMEOUT"],
        )

    def embed(self, text: str) -> Embedding:
        reply = self.api.post_json("", {"text": text, "model": self.model})
        vector = reply.get("vector") if isinstance(reply, dict) else None
        if not isinstance(vector, list) or len(vector) != self.dimension:
            raise EmbeddingFailure(text, f"expected a vector of {self.dimension} reals")
        try:
            return Embedding(vector)
        except (TypeError, ValueError) as e:
            raise EmbeddingFailure(text, str(e)) from e


def provider_from_config(config: Mapping[str, Any]) -> EmbeddingProvider:
    if config.get("EMBEDDING_PROVIDER", "trigram") == "remote":
        return RemoteEmbeddingProvider.from_config(config)
    return TrigramEmbeddingProvider(config.get("EMBEDDING_DIMENSION", 256))


def similarity(a: Embedding, b: Embedding) -> float:
    if a.dimension != b.dimension:
        raise DimensionMismatch(f"{a.dimension} != {b.dimension}")
    value = float(np.dot(a.values, b.values) / (np.linalg.norm(a.values) * np.linalg.norm(b.values)))
    return min(1.0, max(-1.0, value))


# ── Base ──────────────────────────────────────────────────────────────────────


class NodeBase:
    def __init__(
        self,
        specs: Mapping[str, NodeSpec],
        embeddings: Mapping[str, Embedding],
        provider: EmbeddingProvider,
    ) -> None:
        if set(specs) != set(embeddings):
            raise NodeBaseError("specs and embeddings must have the same names")
        for name, embedding in embeddings.items():
            if embedding.dimension != provider.dimension:
                raise DimensionMismatch(f"{name}: {embedding.dimension} != {provider.dimension}")
        self._specs = {name: specs[name] for name in sorted(specs)}
        self._embeddings = {name: embeddings[name] for name in sorted(embeddings)}
        self._names = frozenset(self._specs)
        self.provider = provider

    @property
    def provider_id(self) -> str:
        return self.provider.provider_id

    @property
    def dimension(self) -> int:
        return self.provider.dimension

    @property
    def specs(self) -> Mapping[str, NodeSpec]:
        return MappingProxyType(self._specs)

    @property
    def embeddings(self) -> Mapping[str, Embedding]:
        return MappingProxyType(self._embeddings)

    @property
    def names(self) -> frozenset:
        return self._names

    def __len__(self) -> int:
        return len(self._specs)

    def __contains__(self, name: object) -> bool:
        return name in self._specs

    def lookup(self, name: str) -> Optional[NodeSpec]:
        return self._specs.get(name)


def build_base(specs: Iterable[NodeSpec], provider: EmbeddingProvider) -> NodeBase:
    spec_map: Dict[str, NodeSpec] = {}
    embeddings: Dict[str, Embedding] = {}
    for spec in specs:
        if spec.node_name in spec_map:
            raise DuplicateNodeName(spec.node_name)
        try:
            embeddings[spec.node_name] = provider.embed(spec.node_name)
        except EmbeddingFailure:
            raise
        except (*TRANSPORT_ERRORS, ValueError) as e:
            raise EmbeddingFailure(spec.node_name, str(e)) from e
        spec_map[spec.node_name] = spec
    logger.info("Node database built: %d nodes, provider=%s", len(spec_map), provider.provider_id)
    return NodeBase(spec_map, embeddings, provider)


def ingest(data: Union[bytes, str], provider: EmbeddingProvider) -> NodeBase:
    return build_base(parse_specs(data), provider)


def emit_snapshot(base: NodeBase) -> bytes:
    return emit_specs(base.specs.values())


def lookup(base: NodeBase, node_name: str) -> Optional[NodeSpec]:
    return base.lookup(node_name)


def top_k(
    base: NodeBase,
    query_name: str,
    k: int,
    provider: Optional[EmbeddingProvider] = None,
) -> List[Tuple[str, float]]:
    """Rank stored names by similarity to query_name; ties go to the smaller name."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(base) == 0:
        raise EmptyBase()
    provider = provider or base.provider
    if provider.provider_id != base.provider_id:
        raise ProviderMismatch(f"{provider.provider_id} != {base.provider_id}")

    query = provider.embed(query_name)
    ranked = SortedList(key=lambda item: (-item[1], item[0]))
    for name, embedding in base.embeddings.items():
        ranked.add((name, similarity(query, embedding)))
        if len(ranked) > k:
            ranked.pop()
    return list(ranked)


def merge_snapshots(old: Union[bytes, str], new: Union[bytes, str]) -> bytes:
    return emit_specs(merge_specs(parse_specs(old), parse_specs(new)))
