import numpy as np
from setuptools import Extension, setup

# The compiled kernels are optional: if Cython (or a compiler) is missing the
# package falls back to the pure-numpy twins in nrsfm._kernels_py.
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "nrsfm._kernels",
                ["src/nrsfm/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
