import os

import numpy as np
from setuptools import Extension, setup

# STOPWATT_NO_EXT=1 installs the pure-Python fallback only.
ext_modules = []
if not os.getenv("STOPWATT_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "stopwatt._native",
                ["src/stopwatt/_native.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
