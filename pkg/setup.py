"""Build script: compiles the optional Cython compute core.

The package installs fine without a compiler; battvolt.kernels falls back to
the pure-numpy implementation at import time if the extension is missing.
"""

import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = []
if cythonize is not None and os.path.exists("src/battvolt/kernels/_speedups.pyx"):
    extensions = cythonize(
        [
            Extension(
                "battvolt.kernels._speedups",
                ["src/battvolt/kernels/_speedups.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )

setup(ext_modules=extensions)
