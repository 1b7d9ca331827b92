import warnings

import numpy
from setuptools import setup
from setuptools.command.build_ext import build_ext
from setuptools.extension import Extension


class OptionalBuildExt(build_ext):
    """Build the accelerated kernels if possible, fall back to pure Python."""

    def run(self):
        try:
            super().run()
        except Exception as exc:
            warnings.warn(f"skipping compiled kernels ({exc}); "
                          "the numpy fallback will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"could not compile {ext.name} ({exc}); "
                          "the numpy fallback will be used")


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "hierts.kernels._gru_cy",
        ["src/hierts/kernels/_gru_cy.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], language_level="3")


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
