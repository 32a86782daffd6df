#include "a2i/common.hpp"
