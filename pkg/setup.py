import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    # -ffp-contract=off keeps the compiled kernels bit-identical to the
    # numpy fallback (no FMA contraction of a*b+c expressions).
    ext_modules = cythonize(
        [
            Extension(
                "volmark.kernels._native",
                ["src/volmark/kernels/_native.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                optional=True,
            )
        ],
        language_level="3",
    )
else:
    ext_modules = []

setup(ext_modules=ext_modules)
