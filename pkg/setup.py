import numpy
from setuptools import setup, Extension

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = [
    Extension(
        "mzs._kernels._core",
        ["src/mzs/_kernels/_core.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

setup(
    # the compiled core is optional: without Cython the package installs
    # pure and mzs._kernels selects the numpy fallback at import
    ext_modules=cythonize(extensions, language_level="3") if cythonize else [],
)
