"""Hot-kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``CORRREID_PURE_PYTHON=1`` to force the numpy fallback and
``CORRREID_THREADS`` to cap the OpenMP thread count of the compiled kernels.
"""
import os

from corrreid import _kernels_py

try:
    from corrreid import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKEND = "python" if _ckernels is None or os.environ.get("CORRREID_PURE_PYTHON") else "cython"


def num_threads():
    try:
        return max(1, int(os.environ.get("CORRREID_THREADS", "1")))
    except ValueError:
        return 1


class _Backend:
    def __init__(self, module, threaded):
        self.name = "cython" if threaded else "python"
        self._mod = module
        self._threaded = threaded

    def _kw(self):
        return {"num_threads": num_threads()} if self._threaded else {}

    def topk_rows(self, scores, k):
        return self._mod.topk_rows(scores, k, **self._kw())

    def reciprocal_mask(self, affinity, k):
        return self._mod.reciprocal_mask(affinity, k, **self._kw())

    def masked_softmax(self, scores, mask, sign=1.0):
        return self._mod.masked_softmax(scores, mask, float(sign), **self._kw())

    def ranked_matches_stats(self, matches):
        return self._mod.ranked_matches_stats(matches, **self._kw())


python_backend = _Backend(_kernels_py, threaded=False)
compiled_backend = _Backend(_ckernels, threaded=True) if _ckernels is not None else None
active = compiled_backend if BACKEND == "cython" else python_backend

topk_rows = active.topk_rows
reciprocal_mask = active.reciprocal_mask
masked_softmax = active.masked_softmax
ranked_matches_stats = active.ranked_matches_stats
