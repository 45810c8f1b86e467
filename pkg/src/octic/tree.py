"""Structure-preserving traversal of nested parameter containers.

Parameters live in dataclasses, lists, and dicts of f64 arrays. Non-array
leaves (ints, strings, None) are static: iteration skips them and mapping
copies them from the first tree.
"""
import dataclasses

import numpy as np


def _join(prefix, name):
    return f"{prefix}.{name}" if prefix else str(name)


def iter_arrays(obj, prefix=""):
    """Yield (dotted-path, array) pairs in a fixed traversal order."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from iter_arrays(getattr(obj, f.name), _join(prefix, f.name))
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from iter_arrays(v, _join(prefix, i))
    elif isinstance(obj, dict):
        for k, v in obj.items():
            yield from iter_arrays(v, _join(prefix, k))


def map_arrays(fn, obj, *rest):
    """Apply fn leafwise across trees of identical structure."""
    if isinstance(obj, np.ndarray):
        return fn(obj, *rest)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        kwargs = {
            f.name: map_arrays(fn, getattr(obj, f.name),
                               *(getattr(r, f.name) for r in rest))
            for f in dataclasses.fields(obj)}
        return type(obj)(**kwargs)
    if isinstance(obj, (list, tuple)):
        mapped = [map_arrays(fn, v, *(r[i] for r in rest))
                  for i, v in enumerate(obj)]
        return type(obj)(mapped)
    if isinstance(obj, dict):
        return {k: map_arrays(fn, v, *(r[k] for r in rest))
                for k, v in obj.items()}
    return obj


def map_arrays_with_path(fn, obj, prefix=""):
    """Like map_arrays over one tree, passing the leaf path to fn."""
    if isinstance(obj, np.ndarray):
        return fn(prefix, obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        kwargs = {
            f.name: map_arrays_with_path(
                fn, getattr(obj, f.name), _join(prefix, f.name))
            for f in dataclasses.fields(obj)}
        return type(obj)(**kwargs)
    if isinstance(obj, (list, tuple)):
        mapped = [map_arrays_with_path(fn, v, _join(prefix, i))
                  for i, v in enumerate(obj)]
        return type(obj)(mapped)
    if isinstance(obj, dict):
        return {k: map_arrays_with_path(fn, v, _join(prefix, k))
                for k, v in obj.items()}
    return obj


def add(a, b):
    return map_arrays(lambda x, y: x + y, a, b)


def zeros_like(a):
    return map_arrays(np.zeros_like, a)
