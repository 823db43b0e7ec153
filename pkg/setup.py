"""Build script for the optional compiled kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so compilation failures must not break installation.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "resmtl._kernels",
                ["src/resmtl/_kernels.pyx"],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
