"""Build script: compiles the optional fast kernels when Cython is available.

The package works without the extension (a numpy fallback is selected at
import time), so any build failure here degrades to the pure install.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "fedasmu._kernels._fastkern",
                ["src/fedasmu/_kernels/_fastkern.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
