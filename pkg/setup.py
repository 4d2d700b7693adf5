import os

from setuptools import Extension, setup


def extensions():
    """Compiled kernels are optional: the package falls back to the numpy
    implementation when the extension is absent or fails to build."""
    if os.environ.get("VICALIB_PURE_PYTHON"):
        return []
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "vicalib._kernels._cyimpl",
        sources=["src/vicalib/_kernels/_cyimpl.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    modules = cythonize([ext], language_level="3")
    for mod in modules:
        mod.optional = True
    return modules


setup(ext_modules=extensions())
