# Makes the tests directory a package so tests.gradcheck is importable
