import os

import numpy as np
from setuptools import Extension, setup

# JOSC_NO_EXT=1 skips the compiled kernel; the package then runs on the numpy fallback.
ext_modules = []
if not os.environ.get("JOSC_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "joscillator._kernel",
                ["src/joscillator/_kernel.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-fcx-limited-range"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
