"""Build script; compiles the optional Cython kernels.

The package works without the extension (a pure-numpy fallback is selected
at import time), so any build failure downgrades to a warning.
"""

import sys

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    extensions = cythonize(
        [
            Extension(
                "elicit._kernels",
                ["src/elicit/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    print(f"warning: building without compiled kernels ({exc})", file=sys.stderr)
    extensions = []

setup(ext_modules=extensions)
