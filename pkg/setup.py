"""Build script for the optional compiled matching kernel.

The package works without the extension: gridhail._kernels falls back to the
pure-Python implementation when the compiled module is absent.
"""

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "gridhail._kernels._matching_cy",
                ["src/gridhail/_kernels/_matching_cy.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
