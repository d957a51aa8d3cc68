import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; corrreid.kernels falls back at import
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("CORRREID_NO_EXT"):
    openmp = [] if os.environ.get("CORRREID_NO_OPENMP") else ["-fopenmp"]
    ext = Extension(
        "corrreid._ckernels",
        ["src/corrreid/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"] + openmp,
        extra_link_args=openmp,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext_modules = cythonize([ext], compiler_directives={"language_level": "3"})

setup(ext_modules=ext_modules)
