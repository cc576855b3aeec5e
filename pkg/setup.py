from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as f:
    long_description = f.read()

with open("requirements.txt", "r") as f:
    requirements = [line for line in f.read().splitlines() if line and line != "pytest"]

setup(
    name="gridood",
    version="0.1.0",
    license="MIT",
    python_requires=">=3.10",
    description="Out-of-distribution scoring from grid-detector candidates on synthetic shape scenes",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=requirements,
    extras_require={"test": ["pytest"]},
    entry_points={"console_scripts": ["gridood = gridood.cli:main"]},
)
