"""Build the optional Cython kernels.

The package works without them: ``maskrank.kernels`` falls back to the
numpy implementation when ``maskrank._ckernels`` cannot be imported.

    python setup.py build_ext --inplace
"""
import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "maskrank._ckernels",
                ["src/maskrank/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=ext_modules)
