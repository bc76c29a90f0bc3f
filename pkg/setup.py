"""Build the optional compiled kernel extension.

If Cython or a C compiler is missing the package still installs; ``vpd.kernels``
then falls back to the NumPy implementation.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("VPD_NO_EXTENSION", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "vpd._kernels",
                    ["src/vpd/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
