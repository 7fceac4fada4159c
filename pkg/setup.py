import os

from setuptools import Extension, setup

# The native kernels are optional: the package falls back to the numpy
# implementation when the extension is absent or fails to build.
ext_modules = []
if os.environ.get("OBVI_SKIP_NATIVE", "0") != "1":
    try:
        import numpy
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "obvi.kernels._native",
                    ["src/obvi/kernels/_native.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
