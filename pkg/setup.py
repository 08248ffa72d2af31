import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# fp-contract off: the compiled kernels must agree bit-for-bit with the
# numpy fallback, so no fused multiply-add and no fast-math.
extensions = [
    Extension(
        "dfcn._kernels",
        ["src/dfcn/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
)
