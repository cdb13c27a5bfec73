import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("SMPO_LAB_NO_EXT", "") in ("", "0"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [Extension("smpo_lab.kernels._mlp", ["src/smpo_lab/kernels/_mlp.pyx"],
                   include_dirs=[np.get_include()],
                   define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
        compiler_directives={"language_level": 3},
    )

setup(ext_modules=ext_modules)
