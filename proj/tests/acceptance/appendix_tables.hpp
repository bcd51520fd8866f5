// Expected-answer tables as printed in the appendix: rows N_source 2..9,
// columns N_target 2..9.
#pragma once

#include <array>

using Table8 = std::array<std::array<int, 8>, 8>;

inline constexpr Table8 kContinuedK1{{
    {3, 4, 5, 6, 7, 8, 9, 10},
    {4, 5, 6, 7, 8, 9, 10, 11},
    {5, 6, 7, 8, 9, 10, 11, 12},
    {6, 7, 8, 9, 10, 11, 12, 13},
    {7, 8, 9, 10, 11, 12, 13, 14},
    {8, 9, 10, 11, 12, 13, 14, 15},
    {9, 10, 11, 12, 13, 14, 15, 16},
    {10, 11, 12, 13, 14, 15, 16, 17},
}};

inline constexpr Table8 kContinuedK2{{
    {2, 3, 4, 5, 6, 7, 8, 9},
    {3, 4, 5, 6, 7, 8, 9, 10},
    {4, 5, 6, 7, 8, 9, 10, 11},
    {5, 6, 7, 8, 9, 10, 11, 12},
    {6, 7, 8, 9, 10, 11, 12, 13},
    {7, 8, 9, 10, 11, 12, 13, 14},
    {8, 9, 10, 11, 12, 13, 14, 15},
    {9, 10, 11, 12, 13, 14, 15, 16},
}};

inline constexpr Table8 kContinuedK3{{
    {1, 2, 3, 4, 5, 6, 7, 8},
    {2, 3, 4, 5, 6, 7, 8, 9},
    {3, 4, 5, 6, 7, 8, 9, 10},
    {4, 5, 6, 7, 8, 9, 10, 11},
    {5, 6, 7, 8, 9, 10, 11, 12},
    {6, 7, 8, 9, 10, 11, 12, 13},
    {7, 8, 9, 10, 11, 12, 13, 14},
    {8, 9, 10, 11, 12, 13, 14, 15},
}};

inline constexpr Table8 kMaxLatentK1{{
    {2, 2, 3, 4, 5, 6, 7, 8},
    {3, 3, 3, 4, 5, 6, 7, 8},
    {4, 4, 4, 4, 5, 6, 7, 8},
    {5, 5, 5, 5, 5, 6, 7, 8},
    {6, 6, 6, 6, 6, 6, 7, 8},
    {7, 7, 7, 7, 7, 7, 7, 8},
    {8, 8, 8, 8, 8, 8, 8, 8},
    {9, 9, 9, 9, 9, 9, 9, 9},
}};

inline constexpr Table8 kMaxLatentK2{{
    {2, 2, 2, 3, 4, 5, 6, 7},
    {3, 3, 3, 3, 4, 5, 6, 7},
    {4, 4, 4, 4, 4, 5, 6, 7},
    {5, 5, 5, 5, 5, 5, 6, 7},
    {6, 6, 6, 6, 6, 6, 6, 7},
    {7, 7, 7, 7, 7, 7, 7, 7},
    {8, 8, 8, 8, 8, 8, 8, 8},
    {9, 9, 9, 9, 9, 9, 9, 9},
}};

inline constexpr Table8 kMaxLatentK3{{
    {2, 2, 2, 2, 3, 4, 5, 6},
    {3, 3, 3, 3, 3, 4, 5, 6},
    {4, 4, 4, 4, 4, 4, 5, 6},
    {5, 5, 5, 5, 5, 5, 5, 6},
    {6, 6, 6, 6, 6, 6, 6, 6},
    {7, 7, 7, 7, 7, 7, 7, 7},
    {8, 8, 8, 8, 8, 8, 8, 8},
    {9, 9, 9, 9, 9, 9, 9, 9},
}};
