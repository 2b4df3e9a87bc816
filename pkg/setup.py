import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = []
if cythonize is not None and os.path.exists("src/sessionrec/kernels/_cykernels.pyx"):
    extensions = cythonize(
        [
            Extension(
                "sessionrec.kernels._cykernels",
                ["src/sessionrec/kernels/_cykernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

# The compiled kernels are optional: sessionrec.kernels falls back to the
# numpy implementation when the extension is missing.
setup(ext_modules=extensions)
