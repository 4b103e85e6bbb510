from setuptools import find_packages, setup

setup(
    name="replaysim",
    version="0.1.0",
    description="Class-incremental learning with classifier-guided diffusion rehearsal",
    packages=find_packages(exclude=["tests"]),
    python_requires=">=3.10",
    install_requires=[
        "numpy>=1.26",
        "pandas>=2.2",
        "scikit-learn>=1.4",
        "tqdm>=4.66",
    ],
    extras_require={"test": ["pytest>=8.0"]},
    entry_points={"console_scripts": ["replaysim=replaysim.cli:main"]},
)
