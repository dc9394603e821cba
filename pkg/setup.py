from setuptools import find_packages, setup

setup(
    name="dynaseg",
    packages=find_packages(include=["dynaseg", "dynaseg.*"]),
    package_data={"dynaseg": ["data/*.txt"]},
    version="0.1.0",
    description="A Python library for unsupervised image segmentation with dynamic loss weighting.",
    author="Keviinplz <kevin.pinochet@ug.uchile.cl>",
    license="MIT",
    entry_points={"console_scripts": ["dynaseg=dynaseg.cli:main"]},
)
