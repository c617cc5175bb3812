import pytest

from planrag.bm25 import Passage, build_index


@pytest.fixture(scope="session")
def tiny_index():
    passages = [
        Passage("p1", "Eiffel Tower", "The Eiffel Tower was completed in 1889 in Paris"),
        Passage("p2", "Berlin", "Berlin is the capital city of Germany"),
        Passage("p3", "Louvre", "The Louvre museum is located in Paris France"),
        Passage("p4", "Unification", "The German Empire was proclaimed in 1871"),
        Passage("p5", "Halftime", "The artist headlining the halftime show was announced"),
        Passage("p6", "Slovakia", "Slovakia was part of Czechoslovakia until 1993"),
    ]
    return build_index(passages)
