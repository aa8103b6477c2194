import os

from setuptools import Extension, setup

# The compiled kernels are optional: the package falls back to the pure-Python
# implementation in besqflow._kernels._pure when the extension is missing.
ext_modules = []
if os.environ.get("BESQFLOW_SKIP_EXT") != "1":
    import numpy
    from Cython.Build import cythonize

    ext = Extension(
        "besqflow._kernels._impl",
        sources=[os.path.join("src", "besqflow", "_kernels", "_impl.py")],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext_modules = cythonize([ext], language_level="3")

setup(ext_modules=ext_modules)
