import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# No -ffast-math and no FMA contraction: the compiled kernels must round
# exactly like the numpy fallback (see src/cwmstream/_fallback.py).
extensions = [
    Extension(
        "cwmstream._kernels",
        ["src/cwmstream/_kernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-march=native", "-ffp-contract=off", "-fopenmp"],
        extra_link_args=["-fopenmp"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
