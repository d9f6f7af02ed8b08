import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "camlab._ckernels",
        ["src/camlab/_ckernels.pyx"],
        depends=["src/camlab/_gemm.h"],
        include_dirs=[np.get_include(), "src/camlab"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        # no -ffast-math / -march: results must be reproducible bit-for-bit;
        # _gemm.h picks SIMD width at load time instead
        extra_compile_args=["-O3", "-ffp-contract=off"],
        optional=True,
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
