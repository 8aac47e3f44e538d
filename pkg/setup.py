import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
pyx = os.path.join("src", "drybed", "_core.pyx")
if cythonize is not None and os.path.exists(pyx) and not os.environ.get("DRYBED_SKIP_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "drybed._core",
                [pyx],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-fno-math-errno"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
