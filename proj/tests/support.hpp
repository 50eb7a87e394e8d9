#pragma once

#include "meanstop/fixtures.hpp"
