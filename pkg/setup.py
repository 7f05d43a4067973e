"""Build script for the optional compiled kernel core.

The extension accelerates the two hot loops (row-wise Walsh-Hadamard
butterflies and codebook matching). If it fails to build, the package
still works through the pure-numpy fallback in nsnkv.kernels.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
    import numpy as np
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "nsnkv.kernels._native",
                sources=["src/nsnkv/kernels/_native.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "language_level": "3",
        },
    )

setup(ext_modules=ext_modules)
