#!/usr/bin/env python3
"""
Setup script for the LSGC steganalysis toolkit.
"""

from setuptools import setup, find_packages

def read_readme():
    with open("README.md", "r", encoding="utf-8") as fh:
        return fh.read()

def read_requirements():
    with open("requirements.txt", "r", encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip() and not line.startswith("#")]

setup(
    name="lsgc-steganalysis",
    version="1.0.0",
    description="Linguistic steganalysis with LoRA-tuned language models in generation and classification mode",
    long_description=read_readme(),
    long_description_content_type="text/markdown",
    package_dir={"": "src"},
    packages=find_packages(where="src"),
    package_data={"app": ["data/*.txt", "prompts/templates/*.txt"]},
    python_requires=">=3.10",
    install_requires=read_requirements(),
    extras_require={
        "dev": [
            "pytest",
            "pytest-cov",
            "black",
            "isort",
            "flake8",
        ],
    },
    entry_points={
        "console_scripts": [
            "lsgc=src.cli.main:main",
        ],
    },
    include_package_data=True,
    zip_safe=False,
    keywords="steganalysis,steganography,lora,transformer,nlp",
    license="MIT",
)
