"""Build script for the optional compiled kernel core.

The extension is marked optional: if Cython or a C toolchain is missing the
install still succeeds and the package falls back to the numpy kernels at
import time (see emnn.kernels).
"""

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "emnn.kernels._ckernels",
                sources=["src/emnn/kernels/_ckernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
