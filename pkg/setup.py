"""Build script for the optional compiled filter kernel.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile is not fatal for pure-python installs.
"""

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "dualfilt._wonham_cy",
                ["src/dualfilt/_wonham_cy.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
