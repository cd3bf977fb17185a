import os

from setuptools import setup

ext_modules = []
if os.environ.get("RSALAB_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "rsalab.kernels._convkern",
                    ["src/rsalab/kernels/_convkern.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level="3",
        )
    except ImportError:
        # No Cython at build time: the package still works on the numpy
        # fallback backend selected at import.
        ext_modules = []

setup(ext_modules=ext_modules)
