#ifndef GLMEIV_GLMEIV_HPP
#define GLMEIV_GLMEIV_HPP

#include "glmeiv/assignment.hpp"
#include "glmeiv/data.hpp"
#include "glmeiv/em.hpp"
#include "glmeiv/errors.hpp"
#include "glmeiv/family.hpp"
#include "glmeiv/glm.hpp"
#include "glmeiv/io.hpp"
#include "glmeiv/louis.hpp"
#include "glmeiv/math.hpp"
#include "glmeiv/pipeline.hpp"
#include "glmeiv/rng.hpp"
#include "glmeiv/simulate.hpp"
#include "glmeiv/zero_inflated.hpp"

#endif
