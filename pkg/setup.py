"""Build script for the optional compiled kernels.

The package works without the extension: netagg.fixedpoint falls back to the
numpy implementation when netagg._kernels is missing or when
NETAGG_PURE_PYTHON=1 is set.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "netagg._kernels",
                ["src/netagg/_kernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
