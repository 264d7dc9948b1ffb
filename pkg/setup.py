import os
import sys

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

# -ffast-math is compile-only: linking with it would pull in crtfastmath.o and
# flip FTZ/DAZ for the whole host process.
compile_args = ["-O3", "-ffast-math", "-fopenmp"]
if not os.environ.get("BDSL_SPOTER_PORTABLE"):
    compile_args.append("-march=native")
link_args = ["-fopenmp", "-lm"]


class optional_build_ext(build_ext):
    """Build the compiled kernels if possible; the numpy fallback covers failures."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover - toolchain dependent
            print(f"warning: compiled kernels not built ({exc})", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover - toolchain dependent
            print(f"warning: failed to build {ext.name} ({exc})", file=sys.stderr)


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:  # pragma: no cover
        return []
    ext = Extension(
        "bdsl_spoter.kernels._ext",
        ["src/bdsl_spoter/kernels/_ext.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=compile_args,
        extra_link_args=link_args,
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
