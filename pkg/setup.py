import os

import numpy as np
from setuptools import Extension, setup

ext_kwargs = dict(
    include_dirs=[np.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    # keep IEEE evaluation order: no FMA contraction, no fast-math
    extra_compile_args=["-O3", "-march=native", "-ffp-contract=off", "-fno-fast-math"],
)

ext_modules = []
if os.environ.get("RIVERAL_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [Extension("riveral._kernels", ["src/riveral/_kernels.pyx"], **ext_kwargs)],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
