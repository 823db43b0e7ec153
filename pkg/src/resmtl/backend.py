"""Kernel backend selection.

Two kernel sources exist: the compiled Cython extension
(``resmtl._kernels``) and a numpy fallback (``resmtl._kernels_py``).  The
selected backend is a composition: matrix products always go through
numpy (BLAS beats a hand-rolled serial loop at every shape the engine
trains on; see benchmarks/bench_kernels.py), while the fused element-wise
kernels (relu, relu_backward, adam_update, softmax_rows) come from the
extension when it is importable, because fusion avoids the temporaries
that dominate numpy's cost there.

Set ``RESMTL_BACKEND=python`` or ``RESMTL_BACKEND=compiled`` to force a
choice; selection happens once at import, so a given installation is
deterministic.
"""

import importlib
import os
from dataclasses import dataclass
from typing import Callable

ENV_VAR = "RESMTL_BACKEND"
_NAMES = ("compiled", "python")


def load_kernels(name: str):
    """Import one raw kernel module by name (for tests and benchmarks)."""
    if name == "compiled":
        return importlib.import_module("resmtl._kernels")
    if name == "python":
        return importlib.import_module("resmtl._kernels_py")
    raise ValueError(f"unknown backend {name!r}; expected one of {_NAMES}")


def available_backends() -> tuple[str, ...]:
    found = []
    for name in _NAMES:
        try:
            load_kernels(name)
        except ImportError:
            continue
        found.append(name)
    return tuple(found)


@dataclass(frozen=True)
class KernelSet:
    matmul: Callable
    matmul_at: Callable
    matmul_bt: Callable
    relu: Callable
    relu_backward: Callable
    softmax_rows: Callable
    adam_update: Callable


def make_kernel_set(name: str) -> KernelSet:
    py = load_kernels("python")
    elementwise = load_kernels(name) if name == "compiled" else py
    return KernelSet(
        matmul=py.matmul,  # BLAS; the compiled loop loses here, see benchmarks
        matmul_at=py.matmul_at,
        matmul_bt=py.matmul_bt,
        relu=elementwise.relu,
        relu_backward=elementwise.relu_backward,
        softmax_rows=elementwise.softmax_rows,
        adam_update=elementwise.adam_update,
    )


def _select() -> tuple[KernelSet, str]:
    forced = os.environ.get(ENV_VAR)
    if forced:
        return make_kernel_set(forced), forced
    try:
        return make_kernel_set("compiled"), "compiled"
    except ImportError:
        return make_kernel_set("python"), "python"


kernels, BACKEND = _select()
