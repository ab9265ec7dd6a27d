import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "branchfield.engine._kernel_cy",
                ["src/branchfield/engine/_kernel_cy.pyx"],
                include_dirs=[numpy.get_include()],
                # -ffp-contract=off keeps float arithmetic bit-identical to the
                # numpy lane (no FMA fusion of a*b+c).
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
