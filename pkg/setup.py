"""Build the optional compiled kernels; the package works without them."""
import os
import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext

ext_modules = []
if os.environ.get("PNEUMOSEG_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        openmp = [] if sys.platform == "darwin" else ["-fopenmp"]
        ext_modules = cythonize(
            [
                Extension(
                    "pneumoseg.tensor._ckernels",
                    ["src/pneumoseg/tensor/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"] + openmp,
                    extra_link_args=openmp,
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []


class OptionalBuildExt(build_ext):
    """Fall back to the numpy kernels when compilation fails."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, headers missing, ...
            print(f"warning: compiled kernels not built ({exc}); using numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: failed to build {ext.name} ({exc}); using numpy fallback")


setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
