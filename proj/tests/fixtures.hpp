#pragma once

#include "gftrees/family.hpp"

namespace fixtures {

using namespace gftrees;

inline Box box(std::initializer_list<Interval> iv)
{
    Box b;
    b.iv = iv;
    return b;
}

inline Vec vec(std::initializer_list<double> v)
{
    Vec r(v.size());
    int i = 0;
    for (double x : v) r[i++] = x;
    return r;
}

inline GeneratingFamily unknot()
{
    Layout L{1, 1, 1};
    return GeneratingFamily(Base::Euclidean, 1, 1, Expr::parse("e1^3/3 + (x1^2 - 1)*e1", L), vec({1.0}),
                            box({{-1.1, 1.1}, {-1.15, 1.15}}), box({{-1.2, 1.2}, {-1.29, 1.29}}));
}

inline GeneratingFamily unknot_twisted()
{
    Layout L{1, 1, 1};
    return unknot().precompose_fpd({Expr::parse("e1 + 0.2*bump(e1/0.6)*bump(x1/0.6)", L)});
}

// three chords: a at x = 0 (grading 1), b1 and b2 at x = -1, 1 (grading 2)
inline GeneratingFamily dimple()
{
    Layout L{1, 1, 1};
    return GeneratingFamily(Base::Euclidean, 1, 1, Expr::parse("e1^3/3 + ((x1^2 - 1)^2 - 2)*e1", L), vec({3.0}),
                            box({{-1.6, 1.6}, {-1.6, 1.6}}), box({{-1.7, 1.7}, {-2.0, 2.0}}));
}

inline GeneratingFamily linear()
{
    Layout L{1, 1, 1};
    return GeneratingFamily(Base::Euclidean, 1, 1, Expr::parse("e1", L), vec({1.0}), box({{-1, 1}, {-1, 1}}),
                            box({{-2, 2}, {-2, 2}}));
}

} // namespace fixtures
